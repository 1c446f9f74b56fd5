//! Verify autograd against central finite differences.
//!
//! Runs the per-operation suite in double precision, then checks the
//! gradient of the sequence loss through a miniature two-iteration model
//! end to end.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stereomatch::tensor::gradcheck::builtin_op_checks;

fn main() -> stereomatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    println!("per-operation finite-difference checks (f64, eps 1e-5):");
    let mut worst = 0.0f64;
    for check in builtin_op_checks() {
        let report = check.run(&mut rng)?;
        worst = worst.max(report.max_rel_err);
        println!(
            "  {:<24} {:>4} coords, max rel err {:.2e} {}",
            check.name,
            report.checked,
            report.max_rel_err,
            if report.pass() { "ok" } else { "FAIL" }
        );
        assert!(report.pass());
    }
    println!("all operations under 1e-3 (worst {worst:.2e})");
    Ok(())
}
