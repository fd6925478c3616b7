//! Polyline tokens: point features pooled by a category query, then
//! relation-aware self-attention between nearby polylines.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::DecoderConfig;
use crate::geometry::{fourier_features_into, polyline_frame, relative_descriptor, FourierBands, ReferenceFrame};
use crate::nn::{AttentionSpec, Builder, Embedding, Mlp, NnError, Pairs, RelAttention};
use crate::params::Init;
use crate::scalar::Scalar;
use crate::scene::{MapGraph, PointCategory, Polyline, PolylineCategory, RelationType};
use crate::tensor::Tensor;

/// Relation vocabulary row for a polyline attending to itself.
pub const SELF_RELATION: usize = RelationType::COUNT;

#[derive(Debug, Clone)]
pub struct MapTokens {
    /// `[M, D]`
    pub tokens: Var,
    /// One frame per polyline, in scene coordinates.
    pub frames: Vec<ReferenceFrame<f64>>,
}

/// Point tokens of one polyline and their descriptors from the polyline frame.
#[derive(Debug, Clone)]
pub struct PointTokens {
    /// `[points - 1, D]`
    pub tokens: Var,
    pub rel: Vec<[f64; 3]>,
}

#[derive(Debug, Clone)]
pub struct MapEncoder<T> {
    pub dim: usize,
    pub radius: f64,
    bands: FourierBands<T>,
    point_mlp: Mlp,
    point_cat: Embedding,
    poly_cat: Embedding,
    pool: RelAttention<T>,
    relation: Embedding,
    layers: Vec<RelAttention<T>>,
}

fn point_geometry(p: &Polyline) -> (ReferenceFrame<f64>, Vec<[f64; 2]>, Vec<[f64; 3]>) {
    let frame = polyline_frame(&p.points);
    let (c, s) = (frame.theta.cos(), frame.theta.sin());
    let mut offsets = Vec::with_capacity(p.points.len() - 1);
    let mut rel = Vec::with_capacity(p.points.len() - 1);
    for w in p.points.windows(2) {
        let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
        offsets.push([c * dx + s * dy, -s * dx + c * dy]);
        let pf = ReferenceFrame::new(w[0][0], w[0][1], dy.atan2(dx), 0);
        rel.push(relative_descriptor(&frame, &pf).spatial());
    }
    (frame, offsets, rel)
}

impl<T: Scalar> MapEncoder<T> {
    pub fn new<R: Rng>(bld: &mut Builder<T, R>, cfg: &DecoderConfig, dropout: f64) -> Result<Self, NnError> {
        let d = cfg.dim;
        let bands = cfg.bands::<T>();
        let spec = AttentionSpec {
            dim: d,
            heads: cfg.heads,
            dropout,
            radius: Some(cfg.radius),
        };
        let mut s = bld.scope("map");
        let layers = (0..cfg.rounds)
            .map(|i| RelAttention::new(&mut s, &format!("self{i}"), spec, 3, bands.clone()))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            dim: d,
            radius: cfg.radius,
            point_mlp: Mlp::new(&mut s, "point_mlp", &[bands.output_dim(2), d, d])?,
            point_cat: Embedding::new(&mut s, "point_cat", PointCategory::COUNT, d, Init::TruncNormal(0.02))?,
            poly_cat: Embedding::new(&mut s, "poly_cat", PolylineCategory::COUNT, d, Init::TruncNormal(0.02))?,
            pool: RelAttention::new(&mut s, "pool", AttentionSpec { radius: None, ..spec }, 3, bands.clone())?,
            relation: Embedding::new(&mut s, "relation", RelationType::COUNT + 1, d, Init::TruncNormal(0.02))?,
            layers,
            bands,
        })
    }

    fn points_batch(&self, g: &mut Graph<T>, polys: &[&Polyline]) -> Result<(Var, Vec<Vec<[f64; 3]>>), NnError> {
        let fdim = self.bands.output_dim(2);
        let mut feats = Vec::new();
        let mut cats = Vec::new();
        let mut rels = Vec::with_capacity(polys.len());
        let mut rows = 0;
        for p in polys {
            let (_, offsets, rel) = point_geometry(p);
            for (i, o) in offsets.iter().enumerate() {
                fourier_features_into(&[T::of(o[0]), T::of(o[1])], &self.bands, &mut feats);
                cats.push(p.point_categories[i].index());
            }
            rows += offsets.len();
            rels.push(rel);
        }
        let f = g.constant(Tensor::from_vec(rows, fdim, feats));
        let h = self.point_mlp.forward(g, f);
        let e = self.point_cat.lookup(g, &cats)?;
        Ok((g.add(h, e), rels))
    }

    /// Point-level tokens: MLP of Fourier features of the offset to the next
    /// point in the polyline frame, plus the point category embedding.
    pub fn encode_points(&self, g: &mut Graph<T>, p: &Polyline) -> Result<PointTokens, NnError> {
        let (tokens, mut rel) = self.points_batch(g, &[p])?;
        Ok(PointTokens {
            tokens,
            rel: rel.pop().unwrap(),
        })
    }

    /// A category query cross-attends to the point tokens.
    pub fn pool_polyline(
        &self,
        g: &mut Graph<T>,
        points: &PointTokens,
        category: PolylineCategory,
    ) -> Result<Var, NnError> {
        let q = self.poly_cat.lookup(g, &[category.index()])?;
        let mut pairs = Pairs::new(3);
        for r in &points.rel {
            pairs.push(0, pairs.len(), &r.map(T::of));
        }
        Ok(self.pool.forward(g, q, points.tokens, &pairs, None, &[true]))
    }

    pub fn encode_map(&self, g: &mut Graph<T>, map: &MapGraph) -> Result<MapTokens, NnError> {
        let polys: Vec<&Polyline> = map.polylines.iter().collect();
        let m = polys.len();
        let frames: Vec<ReferenceFrame<f64>> = polys.iter().map(|p| polyline_frame(&p.points)).collect();
        if m == 0 {
            return Ok(MapTokens {
                tokens: g.constant(Tensor::zeros(0, self.dim)),
                frames,
            });
        }
        let (points, rels) = self.points_batch(g, &polys)?;
        let cats: Vec<usize> = polys.iter().map(|p| p.category.index()).collect();
        let q = self.poly_cat.lookup(g, &cats)?;
        let mut pairs = Pairs::new(3);
        let mut offset = 0;
        for (i, rel) in rels.iter().enumerate() {
            for (j, r) in rel.iter().enumerate() {
                pairs.push(i, offset + j, &r.map(T::of));
            }
            offset += rel.len();
        }
        let mut x = self.pool.forward(g, q, points, &pairs, None, &vec![true; m]);

        let mut pairs = Pairs::new(3);
        let mut types = Vec::new();
        for i in 0..m {
            for j in 0..m {
                let d = relative_descriptor(&frames[i], &frames[j]);
                if d.distance > self.radius {
                    continue;
                }
                pairs.push(i, j, &d.spatial().map(T::of));
                types.push(if i == j {
                    SELF_RELATION
                } else {
                    map.relation(j, i).unwrap_or(RelationType::Nearby).index()
                });
            }
        }
        for layer in &self.layers {
            let e = self.relation.lookup(g, &types)?;
            x = layer.forward(g, x, x, &pairs, Some(e), &vec![true; m]);
        }
        Ok(MapTokens { tokens: x, frames })
    }
}
