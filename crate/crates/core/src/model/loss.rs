use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// Colorization loss: L1 distance over both chroma planes and every pixel,
/// averaged over the batch.
pub fn loss_colorization<T: Scalar>(tape: &mut Tape<T>, pred_ab: Var, gt_ab: Var) -> Result<Var> {
    if tape.shape(pred_ab) != tape.shape(gt_ab) {
        return Err(Error::shape(
            "loss_colorization",
            format!("pred {:?} vs target {:?}", tape.shape(pred_ab), tape.shape(gt_ab)),
        ));
    }
    let [batch, ..] = tape.value(pred_ab).dims4()?;
    let diff = tape.sub(pred_ab, gt_ab)?;
    let abs = tape.abs(diff);
    let total = tape.sum(abs);
    Ok(tape.scale(total, T::one() / T::from_usize_lossy(batch.max(1))))
}

/// Pose loss on translation and log-rotation vectors, both `[B,3]`:
/// `mean_b(‖x̂ − x‖ + beta_intra·‖ŵ − w‖)`.
pub fn loss_pose<T: Scalar>(
    tape: &mut Tape<T>,
    x_hat: Var,
    w_hat: Var,
    x_gt: Var,
    w_gt: Var,
    beta_intra: T,
) -> Result<Var> {
    for (name, v) in [("x_hat", x_hat), ("w_hat", w_hat), ("x_gt", x_gt), ("w_gt", w_gt)] {
        if !matches!(tape.shape(v), [_, 3]) || tape.shape(v)[0] != tape.shape(x_hat)[0] {
            return Err(Error::shape(
                "loss_pose",
                format!("{name} must be [B,3] with a shared B, got {:?}", tape.shape(v)),
            ));
        }
    }
    let dx = tape.sub(x_hat, x_gt)?;
    let nx = tape.row_norm(dx)?;
    let t = tape.mean(nx);
    let dw = tape.sub(w_hat, w_gt)?;
    let nw = tape.row_norm(dw)?;
    let r = tape.mean(nw);
    let r = tape.scale(r, beta_intra);
    tape.add(t, r)
}

/// `beta_inter·L_c + L_l`; exactly `L_l` when there is no colorization term.
pub fn loss_joint<T: Scalar>(tape: &mut Tape<T>, l_c: Option<Var>, l_l: Var, beta_inter: T) -> Result<Var> {
    match l_c {
        None => Ok(l_l),
        Some(l_c) => {
            let weighted = tape.scale(l_c, beta_inter);
            tape.add(weighted, l_l)
        }
    }
}
