//! A discrete three-outcome model where the target outcome marginal cannot
//! be recovered: every admissible `t` gives the same observable `pr(X = 0)`.

use labelshift::sampling::identifiability::{example1_target_marginal, target_marginal, T_LOWER};

fn main() -> labelshift::Result<()> {
    println!("{:>8} {:>10} {:>10} {:>10} {:>12}", "t", "q(0)", "q(1)", "q(2)", "pr(X=0)");
    for t in [0.035, 0.045, 0.055, 0.06] {
        let q = target_marginal(t)?;
        println!("{t:>8.3} {:>10.5} {:>10.5} {:>10.5} {:>12.10}", q[0], q[1], q[2], example1_target_marginal(t)?);
    }
    println!("t must exceed {T_LOWER}; the observable margin is 7/12 = {:.10}", 7.0 / 12.0);
    Ok(())
}
