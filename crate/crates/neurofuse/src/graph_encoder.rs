//! Graph snapshot encoder: two graph-convolution layers over atlas node
//! features, a projection layer, and a pooled readout.
//!
//! The convolution is `SELU(D^-1/2 A D^-1/2 H W)` where D counts the
//! *nonzero* entries of each adjacency row (indicator degree, not weighted
//! degree). Self-loops guarantee every degree is at least 1. A GAT-style
//! variant replaces the normalized propagation with single-head additive
//! attention over the nonzero edge pattern.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamSet};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::rng::Rng;

/// One atlas region: MNI coordinates plus a functional-system label.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasRegion {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub system: String,
}

/// Region table plus the ordered system vocabulary (first appearance order).
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasMetadata {
    pub regions: Vec<AtlasRegion>,
    pub systems: Vec<String>,
}

impl AtlasMetadata {
    pub fn new(regions: Vec<AtlasRegion>) -> Result<Self> {
        if regions.len() < 2 {
            return Err(Error::contract("AtlasMetadata", "need at least 2 regions"));
        }
        let mut systems: Vec<String> = Vec::new();
        for r in &regions {
            if !(r.x.is_finite() && r.y.is_finite() && r.z.is_finite()) {
                return Err(Error::NonFinite { context: format!("atlas region {}", r.id) });
            }
            if !systems.contains(&r.system) {
                systems.push(r.system.clone());
            }
        }
        Ok(AtlasMetadata { regions, systems })
    }

    pub fn region_count(&self) -> usize {
        self.regions.len()
    }

    /// Node feature width: x, y, z plus one-hot system encoding.
    pub fn feature_width(&self) -> usize {
        3 + self.systems.len()
    }

    /// Parse `region_id,x,y,z,system` CSV (header required).
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::parse("atlas csv", e.to_string()))?.clone();
        let expect = ["region_id", "x", "y", "z", "system"];
        let cols: Vec<usize> = expect
            .iter()
            .map(|name| {
                headers
                    .iter()
                    .position(|h| h == *name)
                    .ok_or_else(|| Error::parse("atlas csv", format!("missing column {:?}", name)))
            })
            .collect::<Result<_>>()?;
        let mut regions = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| Error::parse("atlas csv", e.to_string()))?;
            let field = |i: usize| -> Result<&str> {
                record.get(cols[i]).ok_or_else(|| Error::parse("atlas csv", "short row"))
            };
            let num = |i: usize| -> Result<f64> {
                field(i)?
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::parse("atlas csv", format!("bad number {:?}", field(i).unwrap_or(""))))
            };
            regions.push(AtlasRegion {
                id: field(0)?.to_string(),
                x: num(1)?,
                y: num(2)?,
                z: num(3)?,
                system: field(4)?.to_string(),
            });
        }
        Self::new(regions)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["region_id", "x", "y", "z", "system"])
            .map_err(|e| Error::parse("atlas csv", e.to_string()))?;
        for r in &self.regions {
            wtr.write_record(&[
                r.id.clone(),
                format!("{}", r.x),
                format!("{}", r.y),
                format!("{}", r.z),
                r.system.clone(),
            ])
            .map_err(|e| Error::parse("atlas csv", e.to_string()))?;
        }
        wtr.flush().map_err(|e| Error::parse("atlas csv", e.to_string()))?;
        Ok(())
    }
}

/// Raw node features before standardization: `[x, y, z, one-hot(system)]`.
pub fn raw_node_features(atlas: &AtlasMetadata) -> Result<Tensor> {
    let r = atlas.region_count();
    let f = atlas.feature_width();
    let mut h = Tensor::zeros(r, f);
    for (i, region) in atlas.regions.iter().enumerate() {
        h.set(i, 0, region.x);
        h.set(i, 1, region.y);
        h.set(i, 2, region.z);
        let sys = atlas
            .systems
            .iter()
            .position(|s| *s == region.system)
            .ok_or_else(|| Error::UnknownSystem { region: region.id.clone(), label: region.system.clone() })?;
        h.set(i, 3 + sys, 1.0);
    }
    Ok(h)
}

/// Node feature matrix H0 with coordinates standardized per axis (zero mean,
/// unit population variance over regions). A degenerate axis (all regions at
/// the same coordinate) is centered but left unscaled.
pub fn node_feature_matrix(atlas: &AtlasMetadata) -> Result<Tensor> {
    let mut h = raw_node_features(atlas)?;
    let r = atlas.region_count();
    for axis in 0..3 {
        let mean: f64 = (0..r).map(|i| h.get(i, axis)).sum::<f64>() / r as f64;
        let var: f64 = (0..r).map(|i| (h.get(i, axis) - mean).powi(2)).sum::<f64>() / r as f64;
        let scale = if var > 1e-24 { 1.0 / var.sqrt() } else { 1.0 };
        for i in 0..r {
            h.set(i, axis, (h.get(i, axis) - mean) * scale);
        }
    }
    Ok(h)
}

/// Indicator degrees: count of nonzero entries per row.
pub fn indicator_degrees(a: &Tensor) -> Vec<usize> {
    let (r, c) = a.shape();
    (0..r).map(|i| (0..c).filter(|&j| a.get(i, j) != 0.0).count()).collect()
}

/// `D^-1/2 A D^-1/2` with indicator degrees; errors on a zero-degree row.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.shape();
    if r != c {
        return Err(Error::dim("normalize_adjacency", format!("{}x{} not square", r, c)));
    }
    let deg = indicator_degrees(a);
    if let Some(node) = deg.iter().position(|&d| d == 0) {
        return Err(Error::DegenerateGraph { node });
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| 1.0 / (d as f64).sqrt()).collect();
    let mut out = Tensor::zeros(r, r);
    for i in 0..r {
        for j in 0..r {
            out.set(i, j, inv_sqrt[i] * a.get(i, j) * inv_sqrt[j]);
        }
    }
    Ok(out)
}

/// One graph-convolution layer on the tape, normalization included.
pub fn gcn_layer(tape: &mut Tape, h: Var, a: &Tensor, w: Var) -> Result<Var> {
    let abar = tape.leaf(normalize_adjacency(a)?)?;
    gcn_layer_prenormalized(tape, h, abar, w)
}

/// Graph-convolution layer when `abar` (possibly itself a tracked value, as
/// in the explainer) is already degree-normalized.
pub fn gcn_layer_prenormalized(tape: &mut Tape, h: Var, abar: Var, w: Var) -> Result<Var> {
    let hw = tape.matmul(h, w)?;
    let prop = tape.matmul(abar, hw)?;
    tape.selu(prop)
}

/// Single-head additive attention layer over the nonzero edge pattern
/// (GAT-style scoring with LeakyReLU slope 0.2). Edge weights beyond the
/// zero/nonzero pattern do not enter the scores.
pub fn gat_layer(
    tape: &mut Tape,
    h: Var,
    pattern: &Arc<Vec<bool>>,
    n: usize,
    w: Var,
    a_src: Var,
    a_dst: Var,
) -> Result<Var> {
    let z = tape.matmul(h, w)?;
    let u = tape.matmul(z, a_src)?; // n x 1
    let v = tape.matmul(z, a_dst)?; // n x 1
    let ones_row = tape.leaf(Tensor::filled(1, n, 1.0))?;
    let ones_col = tape.leaf(Tensor::filled(n, 1, 1.0))?;
    let vt = tape.transpose(v)?;
    let left = tape.matmul(u, ones_row)?;
    let right = tape.matmul(ones_col, vt)?;
    let scores = tape.add(left, right)?;
    let scores = tape.leaky_relu(scores, 0.2)?;
    let alpha = tape.masked_row_softmax(scores, pattern.clone())?;
    let agg = tape.matmul(alpha, z)?;
    tape.selu(agg)
}

/// Nonzero-entry pattern of a square adjacency, for attention masking.
pub fn adjacency_pattern(a: &Tensor) -> Arc<Vec<bool>> {
    Arc::new(a.data().iter().map(|&v| v != 0.0).collect())
}

/// Backbone selector for the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    Gcn,
    Gat,
}

/// Pooled readout over node embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    Mean,
    Max,
}

/// Parameter handles for one encoder (shared across all windows of a
/// subject).
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub attn: Option<GatAttention>,
    pub backbone: Backbone,
    pub readout: Readout,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct GatAttention {
    pub a_src1: ParamId,
    pub a_dst1: ParamId,
    pub a_src2: ParamId,
    pub a_dst2: ParamId,
}

fn init_weight(params: &mut ParamSet, group: &str, name: &str, rows: usize, cols: usize, rng: &mut Rng) -> ParamId {
    let bound = (1.0 / rows as f64).sqrt();
    params.push(group, name, Tensor::uniform_init(rows, cols, bound, rng))
}

impl EncoderParams {
    pub fn init(
        params: &mut ParamSet,
        f_in: usize,
        hidden: usize,
        backbone: Backbone,
        readout: Readout,
        rng: &mut Rng,
    ) -> Self {
        let w1 = init_weight(params, "encoder", "w1", f_in, hidden, rng);
        let w2 = init_weight(params, "encoder", "w2", hidden, hidden, rng);
        let proj_w = init_weight(params, "encoder", "proj_w", hidden, hidden, rng);
        let proj_b = params.push("encoder", "proj_b", Tensor::zeros(1, hidden));
        let attn = match backbone {
            Backbone::Gcn => None,
            Backbone::Gat => Some(GatAttention {
                a_src1: init_weight(params, "encoder", "a_src1", hidden, 1, rng),
                a_dst1: init_weight(params, "encoder", "a_dst1", hidden, 1, rng),
                a_src2: init_weight(params, "encoder", "a_src2", hidden, 1, rng),
                a_dst2: init_weight(params, "encoder", "a_dst2", hidden, 1, rng),
            }),
        };
        EncoderParams { w1, w2, proj_w, proj_b, attn, backbone, readout, hidden }
    }
}

/// Bound tape variables for the encoder parameters.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub w1: Var,
    pub w2: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub attn: Option<GatAttentionVars>,
}

#[derive(Debug, Clone, Copy)]
pub struct GatAttentionVars {
    pub a_src1: Var,
    pub a_dst1: Var,
    pub a_src2: Var,
    pub a_dst2: Var,
}

impl EncoderParams {
    pub fn bind(&self, params: &ParamSet, tape: &mut Tape, frozen: bool) -> Result<EncoderVars> {
        let b = |params: &ParamSet, tape: &mut Tape, id: ParamId| -> Result<Var> {
            if frozen {
                params.bind_frozen(tape, id)
            } else {
                params.bind(tape, id)
            }
        };
        Ok(EncoderVars {
            w1: b(params, tape, self.w1)?,
            w2: b(params, tape, self.w2)?,
            proj_w: b(params, tape, self.proj_w)?,
            proj_b: b(params, tape, self.proj_b)?,
            attn: match &self.attn {
                None => None,
                Some(a) => Some(GatAttentionVars {
                    a_src1: b(params, tape, a.a_src1)?,
                    a_dst1: b(params, tape, a.a_dst1)?,
                    a_src2: b(params, tape, a.a_src2)?,
                    a_dst2: b(params, tape, a.a_dst2)?,
                }),
            },
        })
    }
}

/// Encode one graph whose (possibly tracked) adjacency is already on the
/// tape. For the GCN backbone `adj` must be degree-normalized; for GAT it is
/// only consulted through its nonzero pattern, which the caller supplies.
pub fn encode_graph_var(
    tape: &mut Tape,
    adj: Var,
    pattern: &Arc<Vec<bool>>,
    h0: Var,
    vars: &EncoderVars,
    backbone: Backbone,
    readout: Readout,
) -> Result<Var> {
    let n = tape.shape(h0).0;
    let h2 = match backbone {
        Backbone::Gcn => {
            let h1 = gcn_layer_prenormalized(tape, h0, adj, vars.w1)?;
            gcn_layer_prenormalized(tape, h1, adj, vars.w2)?
        }
        Backbone::Gat => {
            let a = vars.attn.as_ref().ok_or_else(|| Error::contract("encode_graph", "GAT backbone without attention parameters"))?;
            let h1 = gat_layer(tape, h0, pattern, n, vars.w1, a.a_src1, a.a_dst1)?;
            gat_layer(tape, h1, pattern, n, vars.w2, a.a_src2, a.a_dst2)?
        }
    };
    let proj = tape.matmul(h2, vars.proj_w)?;
    let proj = tape.add(proj, vars.proj_b)?;
    let proj = tape.selu(proj)?;
    match readout {
        Readout::Mean => tape.mean_rows(proj),
        Readout::Max => tape.block_max_rows(proj, n),
    }
}

/// Convenience inference entry point: encode one weighted graph snapshot
/// into a `hidden`-dimensional embedding.
pub fn encode_graph(
    adjacency: &Tensor,
    atlas: &AtlasMetadata,
    params: &ParamSet,
    encoder: &EncoderParams,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let h0 = tape.leaf(node_feature_matrix(atlas)?)?;
    let vars = encoder.bind(params, &mut tape, true)?;
    let adj_var = match encoder.backbone {
        Backbone::Gcn => tape.leaf(normalize_adjacency(adjacency)?)?,
        Backbone::Gat => tape.leaf(adjacency.clone())?,
    };
    let pattern = adjacency_pattern(adjacency);
    let out = encode_graph_var(&mut tape, adj_var, &pattern, h0, &vars, encoder.backbone, encoder.readout)?;
    Ok(tape.value(out).data().to_vec())
}
