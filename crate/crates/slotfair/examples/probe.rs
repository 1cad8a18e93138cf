use slotfair::cut::{tripartition_cut, DivisibilityEvidence};
use slotfair::measure::UtilityFn;
use slotfair::numeric::rat;
use slotfair::schedule::Schedule;
use std::time::Instant;

fn main() {
    let u1 = UtilityFn::geometric(rat("199/200")).unwrap();
    let u2 = UtilityFn::geometric(rat("399/400")).unwrap();
    let p = rat("1/1000000000000000000");
    let p4 = &p / &rat("4");
    let t = Instant::now();
    let cut1 = tripartition_cut(&u1, &Schedule::full(), &rat("1/3"), &DivisibilityEvidence::Exact).unwrap();
    let cut2 = tripartition_cut(&u1, &cut1.remainder, &rat("1/3"), &DivisibilityEvidence::Certified(rat("53"))).unwrap();
    println!("cuts 1-2: {:?}", t.elapsed());
    let pieces = [cut1.taken.clone(), cut2.taken.clone(), cut2.remainder.clone()];
    let t = Instant::now();
    let vals: Vec<_> = pieces.iter().map(|x| u2.mass_interval(x, &p4).unwrap()).collect();
    println!("trim evals: {:?}", t.elapsed());
    for v in &vals { println!("  [{:.6}, {:.6}]", v.lo().to_f64_lossy(), v.hi().to_f64_lossy()); }
    // trim the largest
    let trim = &rat("13/1000"); // approx gap
    let t = Instant::now();
    let cut3 = tripartition_cut(&u2, &pieces[1], trim, &DivisibilityEvidence::Certified(rat("17"))).unwrap();
    println!("trim cut: {:?}", t.elapsed());
    let e_sched = cut3.taken.clone();
    let t = Instant::now();
    let tv = rat("13/1000");
    let third = &tv / &rat("3");
    let cut4 = tripartition_cut(&u2, &e_sched, &third, &DivisibilityEvidence::Certified(rat("5"))).unwrap();
    println!("cut4: {:?}", t.elapsed());
    let t = Instant::now();
    let cut5 = slotfair::cut::greedy_cut(&u2, &cut4.remainder, &third, &DivisibilityEvidence::Certified(rat("1"))).unwrap();
    println!("cut5: {:?}", t.elapsed());
    let t = Instant::now();
    let i = u1.mass_interval(&cut5.taken, &p).unwrap();
    println!("u1 eval of E3: {:?} ({:.3e} wide)", t.elapsed(), i.width().to_f64_lossy());
}
