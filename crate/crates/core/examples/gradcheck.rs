//! Finite-difference checks of every differentiable primitive and every
//! attention body.

use fair_denoise::arch::body_suite;
use fair_denoise::tensor::primitive_suite;

fn main() -> fair_denoise::Result<()> {
    let tol = 1e-4;
    let prims = primitive_suite(tol)?
        .into_iter()
        .map(|(n, r)| (n.to_string(), r));
    let mut failed = 0;
    for (name, r) in prims.chain(body_suite(tol)?) {
        println!(
            "{} {name:<32} rel {:.2e}",
            if r.pass { "ok  " } else { "FAIL" },
            r.max_rel_error
        );
        failed += usize::from(!r.pass);
    }
    println!("{failed} failures");
    Ok(())
}
