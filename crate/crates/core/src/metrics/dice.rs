use crate::error::{Error, Result};
use crate::types::{Grid, LabelMap};

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(pred: &Grid<bool>, gt: &Grid<bool>) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("dice of {:?} and {:?} masks", pred.dims(), gt.dims())));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    Ok(ratio(inter, a, b))
}

fn ratio(inter: usize, a: usize, b: usize) -> f64 {
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// Dice of the binary masks `pred == value` and `gt == value`.
pub fn class_dice(pred: &LabelMap, gt: &LabelMap, value: u8) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("dice of {:?} and {:?} label maps", pred.dims(), gt.dims())));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        let (p, g) = (p == value, g == value);
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    Ok(ratio(inter, a, b))
}

/// Soft Dice of one class from per-pixel probabilities.
pub fn soft_dice(prob: &[f64], gt: &[bool]) -> f64 {
    let (mut inter, mut a, mut b) = (0.0, 0.0, 0.0);
    for (&p, &g) in prob.iter().zip(gt) {
        let g = g as u8 as f64;
        inter += p * g;
        a += p;
        b += g;
    }
    if a + b == 0.0 {
        1.0
    } else {
        2.0 * inter / (a + b)
    }
}
