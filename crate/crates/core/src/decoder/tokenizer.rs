use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::geometry::{fourier_features_into, wrap_relative, FourierBands, ReferenceFrame, MIN_OFFSET};
use crate::nn::{Builder, Embedding, Mlp, NnError};
use crate::params::Init;
use crate::scalar::Scalar;
use crate::scene::AgentType;
use crate::tensor::Tensor;

use super::DecoderError;

pub const STEP_FEATURES: usize = 8;
const HZ: f64 = 10.0;

/// One segment of global states `[x, y, heading]` with validity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub states: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
    pub frame: ReferenceFrame<f64>,
    pub agent_type: AgentType,
}

/// Per-step kinematic features relative to `frame`, one row for each
/// consecutive pair of states: local position, local heading, local motion
/// vector, angular motion, speed and heading minus motion direction.
/// Rows touching an invalid state are zero.
pub fn segment_features(states: &[[f64; 3]], valid: &[bool], frame: &ReferenceFrame<f64>) -> Vec<[f64; 8]> {
    let (c, s) = (frame.theta.cos(), frame.theta.sin());
    (1..states.len())
        .map(|i| {
            if !(valid[i] && valid[i - 1]) {
                return [0.0; 8];
            }
            let [x, y, h] = states[i];
            let [px, py, ph] = states[i - 1];
            let (rx, ry) = (x - frame.x, y - frame.y);
            let (dx, dy) = (x - px, y - py);
            let dist = dx.hypot(dy);
            let slip = if dist >= MIN_OFFSET { wrap_relative(h - dy.atan2(dx)) } else { 0.0 };
            [
                c * rx + s * ry,
                -s * rx + c * ry,
                wrap_relative(h - frame.theta),
                c * dx + s * dy,
                -s * dx + c * dy,
                wrap_relative(h - ph),
                dist * HZ,
                slip,
            ]
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Tokenizer<T> {
    pub t_sub: usize,
    pub dim: usize,
    bands: FourierBands<T>,
    step_mlp: Mlp,
    seg_mlp: Mlp,
    type_emb: Embedding,
}

impl<T: Scalar> Tokenizer<T> {
    pub fn new<R: Rng>(
        bld: &mut Builder<T, R>,
        t_sub: usize,
        dim: usize,
        bands: FourierBands<T>,
    ) -> Result<Self, NnError> {
        let mut s = bld.scope("tokenizer");
        Ok(Self {
            step_mlp: Mlp::new(&mut s, "step", &[bands.output_dim(STEP_FEATURES), dim, dim])?,
            seg_mlp: Mlp::new(&mut s, "segment", &[(t_sub - 1) * dim, dim, dim])?,
            type_emb: Embedding::new(&mut s, "agent_type", AgentType::ALL.len(), dim, Init::TruncNormal(0.02))?,
            t_sub,
            dim,
            bands,
        })
    }

    /// One token per segment, `[segments, D]`.
    pub fn forward(&self, g: &mut Graph<T>, segments: &[Segment]) -> Result<Var, DecoderError> {
        let steps = self.t_sub - 1;
        let fdim = self.bands.output_dim(STEP_FEATURES);
        let mut feats = Vec::with_capacity(segments.len() * steps * fdim);
        let mut types = Vec::with_capacity(segments.len());
        for seg in segments {
            if seg.states.len() != self.t_sub || seg.valid.len() != self.t_sub {
                return Err(DecoderError::SegmentLength {
                    expected: self.t_sub,
                    found: seg.states.len(),
                });
            }
            for row in segment_features(&seg.states, &seg.valid, &seg.frame) {
                fourier_features_into(&row.map(T::of), &self.bands, &mut feats);
            }
            types.push(seg.agent_type.index());
        }
        let n = segments.len();
        let f = g.constant(Tensor::from_vec(n * steps, fdim, feats));
        let h = self.step_mlp.forward(g, f);
        let h = g.reshape(h, n, steps * self.dim);
        let h = self.seg_mlp.forward(g, h);
        let e = self.type_emb.lookup(g, &types)?;
        Ok(g.add(h, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stationary_at_origin_is_all_zero() {
        let f = ReferenceFrame::new(3.0, -2.0, 0.7, 9);
        let states = vec![[3.0, -2.0, 0.7]; 5];
        for row in segment_features(&states, &[true; 5], &f) {
            assert_eq!(row, [0.0; 8]);
        }
    }

    #[test]
    fn constant_velocity_features() {
        // 2 m/s along heading 0.4, frame at the endpoint
        let h = 0.4f64;
        let v = 2.0;
        let states: Vec<[f64; 3]> = (0..6)
            .map(|i| {
                let s = v * 0.1 * i as f64;
                [10.0 + s * h.cos(), 5.0 + s * h.sin(), h]
            })
            .collect();
        let end = states[5];
        let f = ReferenceFrame::new(end[0], end[1], end[2], 5);
        let rows = segment_features(&states, &[true; 6], &f);
        assert_eq!(rows.len(), 5);
        for (i, r) in rows.iter().enumerate() {
            let expect_x = -v * 0.1 * (4 - i) as f64;
            assert!((r[0] - expect_x).abs() < 1e-12);
            assert!(r[1].abs() < 1e-12 && r[2].abs() < 1e-12);
            assert!((r[3] - 0.2).abs() < 1e-12 && r[4].abs() < 1e-12);
            assert!(r[5].abs() < 1e-12);
            assert!((r[6] - v).abs() < 1e-12);
            assert!(r[7].abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_steps_zeroed() {
        let f = ReferenceFrame::new(0.0, 0.0, 0.0, 2);
        let states = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let rows = segment_features(&states, &[false, true, true], &f);
        assert_eq!(rows[0], [0.0; 8]);
        assert_ne!(rows[1], [0.0; 8]);
    }
}
