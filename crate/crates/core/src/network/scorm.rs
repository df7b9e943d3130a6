//! SCorM inspection helpers.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn side(w: &Tensor) -> Result<usize> {
    match *w.shape() {
        [a, b] if a == b => Ok(a),
        ref s => Err(Error::shape(
            "scorm",
            format!("expected a square matrix, got {s:?}"),
        )),
    }
}

/// Reflection across the minor diagonal: `out[i][j] = w[n-1-j][n-1-i]`.
pub fn antitranspose(w: &Tensor) -> Result<Tensor> {
    let n = side(w)?;
    Ok(Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        w.data()[(n - 1 - j) * n + (n - 1 - i)]
    }))
}

/// `||W - antitranspose(W)||_F / ||W||_F`; zero for a zero matrix.
pub fn symmetry_score(w: &Tensor) -> Result<f64> {
    let a = antitranspose(w)?;
    let num: f64 = w
        .data()
        .iter()
        .zip(a.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let den: f64 = w.data().iter().map(|x| x * x).sum();
    Ok(if den == 0.0 { 0.0 } else { (num / den).sqrt() })
}

/// Row-major CSV without a header.
pub fn write_matrix_csv<W: Write>(out: &mut W, w: &Tensor) -> Result<()> {
    let n = side(w)?;
    let io = |e| Error::io("<csv>", e);
    for i in 0..n {
        let row: Vec<String> = w.data()[i * n..(i + 1) * n]
            .iter()
            .map(|v| v.to_string())
            .collect();
        writeln!(out, "{}", row.join(",")).map_err(io)?;
    }
    Ok(())
}
