//! Prints the worst relative error per op from the finite-difference suite.

fn main() {
    let results = fan_tensor::gradcheck::run_suite(2024).expect("suite runs");
    let mut worst = std::collections::BTreeMap::<&str, f64>::new();
    for r in &results {
        let e = worst.entry(r.op).or_default();
        *e = e.max(r.rel_error);
    }
    for (op, err) in worst {
        println!("{op:<18} {err:.2e}");
    }
}
