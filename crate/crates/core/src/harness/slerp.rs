use crate::error::{Error, Result};

/// Below this `sin θ` the endpoints are treated as parallel and interpolated linearly.
pub const PARALLEL_EPS: f64 = 1e-7;

/// Spherical interpolation `sin((1−α)θ)/sin θ·a + sin(αθ)/sin θ·b`.
pub fn slerp(a: &[f64], b: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape { expected: vec![a.len()], got: vec![b.len()] });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::domain("slerp endpoints must be nonzero"));
    }
    if alpha == 0.0 {
        return Ok(a.to_vec());
    }
    if alpha == 1.0 {
        return Ok(b.to_vec());
    }
    let cos = (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let sin = theta.sin();
    let (wa, wb) = if sin < PARALLEL_EPS {
        (1.0 - alpha, alpha)
    } else {
        (((1.0 - alpha) * theta).sin() / sin, (alpha * theta).sin() / sin)
    };
    Ok(a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect())
}
