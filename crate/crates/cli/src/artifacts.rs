//! Files written by the commands. JSON artifacts carry the full config and a
//! version stamp; traces are CSV with fixed columns.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use contrast_lab::format::f64_17;
use contrast_lab::TrainTrace;

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const TRACE_HEADER: &str =
    "t,loss,losstilde_norm,losshat_norm,loss_vec_norm,grad_w_fro,grad_theta_fro,traj_w_fro,traj_theta_fro,step_ms";

pub fn version_stamp() -> Value {
    json!({"name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION")})
}

/// Write the trace as CSV: one row per recorded `t`, floats at 17
/// significant digits.
pub fn emit_trace(trace: &TrainTrace, path: &Path) -> Result<(), CliError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{TRACE_HEADER}")?;
    for r in &trace.records {
        let fields = [
            r.loss,
            r.losstilde_norm,
            r.losshat_norm,
            r.loss_vec_norm,
            r.grad_w_fro,
            r.grad_theta_fro,
            r.traj_w_fro,
            r.traj_theta_fro,
            r.step_ms,
        ];
        write!(out, "{}", r.t)?;
        for x in fields {
            write!(out, ",{}", f64_17(x))?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Long-format export (`t,metric,value`) for plotting tools, including the
/// per-layer spectral distances when they were recorded.
pub fn emit_trace_long(trace: &TrainTrace, path: &Path) -> Result<(), CliError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "t,metric,value")?;
    for r in &trace.records {
        let scalars = [
            ("loss", r.loss),
            ("losstilde_norm", r.losstilde_norm),
            ("losshat_norm", r.losshat_norm),
            ("loss_vec_norm", r.loss_vec_norm),
            ("grad_w_fro", r.grad_w_fro),
            ("grad_theta_fro", r.grad_theta_fro),
            ("traj_w_fro", r.traj_w_fro),
            ("traj_theta_fro", r.traj_theta_fro),
        ];
        for (name, x) in scalars {
            writeln!(out, "{},{name},{}", r.t, f64_17(x))?;
        }
        for (prefix, layers) in [("traj_w_spectral", &r.traj_w_spectral), ("traj_theta_spectral", &r.traj_theta_spectral)] {
            if let Some(values) = layers {
                for (l, x) in values.iter().enumerate() {
                    writeln!(out, "{},{prefix}_{l},{}", r.t, f64_17(*x))?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// JSON document `{"stamp", "config", <key>: payload}`.
pub fn write_json<T: Serialize>(path: &Path, config: &ExperimentConfig, key: &str, payload: &T) -> Result<(), CliError> {
    let doc = json!({
        "stamp": version_stamp(),
        "config": config,
        key: payload,
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
