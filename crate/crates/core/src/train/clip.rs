use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipOutcome {
    /// Global L2 norm before clipping.
    pub norm: f64,
    /// Factor applied to every gradient (1.0 when under the threshold).
    pub scale: f64,
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> ClipOutcome {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = params
        .iter()
        .filter_map(|p| p.grad())
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    if scale != 1.0 {
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    ClipOutcome { norm, scale }
}
