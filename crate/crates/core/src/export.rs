//! CSV writers. Numbers use the shortest decimal form that round-trips
//! an `f64`, so identical runs give byte-identical files.

use std::io::Write;

use nalgebra::DVector;

use crate::backward::AdjointPair;
use crate::control::IterationRecord;
use crate::estimates::ScalingStudy;
use crate::forward::{ensemble_mean, ensemble_variance, ParticleEnsemble};
use crate::triple::TimeGrid;
use crate::Result;

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(w)
}

/// `k,t,component,mean,variance`.
pub fn write_ensemble_summary<W: Write>(w: W, ens: &ParticleEnsemble) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["k", "t", "component", "mean", "variance"])?;
    let means = ensemble_mean(ens);
    let vars = ensemble_variance(ens);
    for (k, (m, v)) in means.iter().zip(&vars).enumerate() {
        let t = fmt(ens.grid().node(k));
        for c in 0..m.len() {
            out.write_record([k.to_string(), t.clone(), c.to_string(), fmt(m[c]), fmt(v[c])])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `particle,k,t,x0,x1,…` for the first `max_paths` particles.
pub fn write_paths<W: Write>(w: W, ens: &ParticleEnsemble, max_paths: usize) -> Result<()> {
    let mut out = writer(w);
    let mut header = vec!["particle".to_string(), "k".into(), "t".into()];
    header.extend((0..ens.dim()).map(|c| format!("x{c}")));
    out.write_record(&header)?;
    for i in 0..ens.particles().min(max_paths) {
        for k in 0..=ens.grid().steps() {
            let mut row = vec![i.to_string(), k.to_string(), fmt(ens.grid().node(k))];
            row.extend(ens.state(k).column(i).iter().map(|v| fmt(*v)));
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `k,t,component,p_mean,q_mean`; `q_mean` is empty at the final node.
pub fn write_adjoint_summary<W: Write>(w: W, pair: &AdjointPair, grid: &TimeGrid) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["k", "t", "component", "p_mean", "q_mean"])?;
    for k in 0..=pair.steps() {
        let p = pair.p_mean(k);
        let q = (k < pair.steps()).then(|| pair.q_mean(k));
        for c in 0..p.len() {
            let qv = q.as_ref().map_or(String::new(), |q| fmt(q[c]));
            out.write_record([k.to_string(), fmt(grid.node(k)), c.to_string(), fmt(p[c]), qv])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `iteration,cost,gradient_norm,step,residual`.
pub fn write_history<W: Write>(w: W, history: &[IterationRecord]) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["iteration", "cost", "gradient_norm", "step", "residual"])?;
    for r in history {
        out.write_record([
            r.iteration.to_string(),
            fmt(r.cost),
            fmt(r.gradient_norm),
            fmt(r.step),
            fmt(r.residual),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// `iteration,change` for fixed-point iterations.
pub fn write_changes<W: Write>(w: W, changes: &[f64]) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["iteration", "change"])?;
    for (i, c) in changes.iter().enumerate() {
        out.write_record([(i + 1).to_string(), fmt(*c)])?;
    }
    out.flush()?;
    Ok(())
}

/// `k,t,component,value` for a per-step vector series (mean controls,
/// mean states).
pub fn write_series<W: Write>(w: W, grid: &TimeGrid, values: &[DVector<f64>]) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["k", "t", "component", "value"])?;
    for (k, v) in values.iter().enumerate() {
        for c in 0..v.len() {
            out.write_record([k.to_string(), fmt(grid.node(k)), c.to_string(), fmt(v[c])])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `t,z,value` for a space-time field sampled on `nodes`.
pub fn write_field<W: Write>(w: W, grid: &TimeGrid, nodes: &[f64], values: &[DVector<f64>]) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["t", "z", "value"])?;
    for (k, v) in values.iter().enumerate() {
        crate::error::check_dim("field width", nodes.len(), v.len())?;
        for (z, x) in nodes.iter().zip(v.iter()) {
            out.write_record([fmt(grid.node(k)), fmt(*z), fmt(*x)])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `delta,lhs,rhs,ratio` followed by one summary row
/// `slope,<slope>,<residual>,<k_hat>`.
pub fn write_study<W: Write>(w: W, study: &ScalingStudy) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_writer(w);
    out.write_record(["delta", "lhs", "rhs", "ratio"])?;
    for p in &study.points {
        out.write_record([fmt(p.delta), fmt(p.lhs), fmt(p.rhs), fmt(p.ratio)])?;
    }
    out.write_record([
        "slope".to_string(),
        fmt(study.fit.slope),
        fmt(study.fit.residual),
        fmt(study.k_hat),
    ])?;
    out.flush()?;
    Ok(())
}

/// Two-column `key,value` table.
pub fn write_summary<W: Write>(w: W, rows: &[(String, f64)]) -> Result<()> {
    let mut out = writer(w);
    out.write_record(["key", "value"])?;
    for (k, v) in rows {
        out.write_record([k.clone(), fmt(*v)])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1e21, f64::MIN_POSITIVE] {
            assert_eq!(fmt(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn summary_layout() {
        let mut buf = Vec::new();
        write_summary(&mut buf, &[("cost".into(), 0.5), ("iterations".into(), 3.0)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "key,value\ncost,0.5\niterations,3\n");
    }

    #[test]
    fn field_rejects_ragged_rows() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let vals = vec![DVector::zeros(2), DVector::zeros(3)];
        assert!(write_field(Vec::new(), &grid, &[0.0, 1.0], &vals).is_err());
    }
}
