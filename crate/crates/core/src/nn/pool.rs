//! 2x2 max pooling with recorded switches, and switch-guided unpooling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Argmax positions recorded by one max-pool layer during a forward pass.
///
/// `positions[o]` is the flat index into the pooled layer's input tensor of
/// the element selected for output element `o`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolSwitches {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    positions: Vec<usize>,
}

impl PoolSwitches {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Checks that every recorded position lies inside its own 2x2 window.
    pub fn validate(&self) -> Result<()> {
        let [b, c, h, w] = dims4(&self.input_shape, "PoolSwitches")?;
        let (oh, ow) = (h / 2, w / 2);
        if self.output_shape != [b, c, oh, ow] || self.positions.len() != b * c * oh * ow {
            return Err(Error::shape("PoolSwitches", &[b, c, oh, ow], &self.output_shape));
        }
        for (o, &p) in self.positions.iter().enumerate() {
            let plane = o / (oh * ow);
            let (r, q) = ((o % (oh * ow)) / ow, o % ow);
            let base = plane * h * w;
            if p < base || p >= base + h * w {
                return Err(Error::invalid(format!("switch {o} leaves its plane")));
            }
            let (pr, pq) = ((p - base) / w, (p - base) % w);
            if pr / 2 != r || pq / 2 != q {
                return Err(Error::invalid(format!("switch {o} outside its 2x2 window")));
            }
        }
        Ok(())
    }
}

fn dims4(shape: &[usize], context: &str) -> Result<[usize; 4]> {
    match shape {
        &[b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::invalid(format!(
            "{context}: expected a [batch, channels, height, width] tensor, got {shape:?}"
        ))),
    }
}

/// Max over non-overlapping 2x2 windows; ties go to the first window element
/// in row-major order. Odd trailing rows/columns are dropped.
pub fn maxpool_forward(x: &Tensor) -> Result<(Tensor, PoolSwitches)> {
    let [b, c, h, w] = dims4(x.shape(), "maxpool2x2")?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::invalid(format!("maxpool2x2 input {:?} too small", x.shape())));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut positions = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for r in 0..oh {
            for q in 0..ow {
                let mut best = base + 2 * r * w + 2 * q;
                for (dr, dq) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * r + dr) * w + 2 * q + dq;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                positions.push(best);
            }
        }
    }
    let output_shape = vec![b, c, oh, ow];
    Ok((
        Tensor::new(output_shape.clone(), out)?,
        PoolSwitches {
            input_shape: x.shape().to_vec(),
            output_shape,
            positions,
        },
    ))
}

/// Routes the pooled gradient back to the switch positions.
pub(crate) fn maxpool_backward(dy: &Tensor, switches: &PoolSwitches) -> Result<Tensor> {
    dy.ensure_shape(&switches.output_shape, "maxpool2x2 backward")?;
    let mut dx = Tensor::zeros(&switches.input_shape);
    let d = dx.data_mut();
    for (&p, &g) in switches.positions.iter().zip(dy.data()) {
        d[p] += g;
    }
    Ok(dx)
}

/// Places each value of `x` at its recorded switch position inside a zero
/// tensor of the pre-pool shape.
pub fn unpool_forward(x: &Tensor, switches: &PoolSwitches) -> Result<Tensor> {
    x.ensure_shape(&switches.output_shape, "unpool2x2")?;
    let mut y = Tensor::zeros(&switches.input_shape);
    let d = y.data_mut();
    for (&p, &v) in switches.positions.iter().zip(x.data()) {
        d[p] = v;
    }
    Ok(y)
}

/// Gathers the gradient at the switch positions.
pub(crate) fn unpool_backward(dy: &Tensor, switches: &PoolSwitches) -> Result<Tensor> {
    dy.ensure_shape(&switches.input_shape, "unpool2x2 backward")?;
    let src = dy.data();
    let data = switches.positions.iter().map(|&p| src[p]).collect();
    Tensor::new(switches.output_shape.clone(), data)
}
