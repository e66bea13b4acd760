//! Linear-quadratic toy games with known equilibria, checked by deviations.

use regime_fbsde::maxprinciple::toy::{lq_equilibrium, lq_game, lq_saddle, lq_zero_sum, LqParams};
use regime_fbsde::maxprinciple::{control_deviations, verify_nash, verify_saddle, DeviationSet, VerifyOptions};
use regime_fbsde::sde::{Control, ControlBox};

fn main() -> regime_fbsde::Result<()> {
    let p = LqParams::default();
    let bx = ControlBox::unbounded();
    let opts = VerifyOptions::default();

    let (u1, u2) = lq_equilibrium(&p);
    let (c1, c2) = (Control::Constant(u1), Control::Constant(u2));
    let devs = DeviationSet { player1: control_deviations(&c1, 1.0, &bx, 1), player2: control_deviations(&c2, 1.0, &bx, 2) };
    let r = verify_nash(&lq_game(&p)?, &c1, &c2, &devs, 20_000, 3, &opts)?;
    println!("nonzero-sum: u* = ({u1:.4}, {u2:.4}), passed = {}, inconclusive = {}", r.passed, r.inconclusive);

    let (u1, u2) = lq_saddle(&p);
    let (c1, c2) = (Control::Constant(u1), Control::Constant(u2));
    let devs = DeviationSet { player1: control_deviations(&c1, 1.0, &bx, 1), player2: control_deviations(&c2, 1.0, &bx, 2) };
    let r = verify_saddle(&lq_zero_sum(&p)?, &c1, &c2, &devs, 20_000, 3, &opts)?;
    println!("zero-sum:    u* = ({u1:.4}, {u2:.4}), passed = {}, J = {:.4}", r.passed, r.candidate_value[0].mean);
    if let Some(w) = &r.worst {
        println!("closest deviation: {:?} {} {:+.2e}", w.player, w.label, w.improvement.mean);
    }
    Ok(())
}
