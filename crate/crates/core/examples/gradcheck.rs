// Finite-difference checks of each component and of the whole objective on
// a toy model.

use constcl::check::run_suite;
use constcl::loss::LossConfig;

fn main() -> constcl::Result<()> {
    for r in run_suite(&LossConfig::default(), &[0])? {
        println!(
            "{:<28} {:>10.3e}  {:>6} coords  {}",
            r.component,
            r.max_rel_error,
            r.coordinates,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
