use std::io::Write;

use super::{AttentionKind, AttentionOutput};
use crate::autodiff::{Graph, Scalar, Var};
use crate::error::Result;

/// One timestep of one sequence, for inspection dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub t: usize,
    pub kind: AttentionKind,
    pub reference: Option<f64>,
    pub steps: Option<f64>,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub mix: Option<f64>,
    pub weights: Vec<f64>,
}

impl AttentionRecord {
    /// Extracts row `row` (valid length `len`) of a batched output.
    pub fn from_output<T: Scalar>(
        g: &Graph<T>,
        out: &AttentionOutput,
        kind: AttentionKind,
        t: usize,
        row: usize,
        len: usize,
    ) -> Self {
        let scalar = |v: Var| g.value(v).data()[row].f64();
        let w = g.value(out.weights);
        let s = w.shape()[1];
        AttentionRecord {
            t,
            kind,
            reference: out.focus.map(|f| scalar(f.reference)),
            steps: out.focus.map(|f| scalar(f.steps)),
            mu: out.focus.map(|f| scalar(f.mu)),
            sigma: out.focus.map(|f| scalar(f.sigma)),
            mix: out.mix.map(scalar),
            weights: w.data()[row * s..row * s + len].iter().map(|x| x.f64()).collect(),
        }
    }
}

fn field(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".to_string(), |v| v.to_string())
}

/// Writes `t,kind,ref,steps,mu,sigma,mix,a_1..a_s` rows with a header.
pub fn write_attention_csv<W: Write>(mut w: W, records: &[AttentionRecord]) -> Result<()> {
    let s = records.first().map_or(0, |r| r.weights.len());
    write!(w, "t,kind,ref,steps,mu,sigma,mix")?;
    for i in 1..=s {
        write!(w, ",a_{i}")?;
    }
    writeln!(w)?;
    for r in records {
        write!(
            w,
            "{},{},{},{},{},{},{}",
            r.t,
            r.kind,
            field(r.reference),
            field(r.steps),
            field(r.mu),
            field(r.sigma),
            field(r.mix)
        )?;
        for a in &r.weights {
            write!(w, ",{a}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
