//! Run registry and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentKind, RunConfig};
use super::experiments::{ErrorRow, MixingReport, PicardReport, RateRow, SlopeFit, StreamAudit};
use crate::error::{Error, Result};
use crate::ldp::ProbeRow;
use crate::rng::{family_id, StreamRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case", deny_unknown_fields)]
pub enum RunStatus {
    Ok,
    Failed { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetrics {
    pub wall_clock_s: f64,
    pub macro_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub run_id: String,
    pub command: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub seed_families: Vec<String>,
    pub outputs: Vec<OutputEntry>,
    pub metrics: RunMetrics,
    pub status: RunStatus,
}

pub const RECORD_FILE: &str = "run.json";
pub const SUMMARY_FILE: &str = "summary.json";

impl RunRecord {
    pub fn new(command: &str, config: &RunConfig) -> Result<Self> {
        let config_hash = config.content_hash()?;
        let seed = config.sim.seed;
        Ok(RunRecord {
            run_id: format!("{}-{seed:016x}", &config_hash[..12]),
            command: command.to_string(),
            config: config.clone(),
            config_hash,
            seed,
            seed_families: [StreamRole::Init, StreamRole::Slow, StreamRole::Fast]
                .into_iter()
                .map(|r| family_id(seed, r))
                .collect(),
            outputs: Vec::new(),
            metrics: RunMetrics {
                wall_clock_s: 0.0,
                macro_steps: 0,
            },
            status: RunStatus::Ok,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RECORD_FILE);
        write_file(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: RunRecord = serde_json::from_str(text)?;
        rec.config.validate()?;
        if rec.config_hash != rec.config.content_hash()? {
            return Err(Error::input("run record hash does not match its config"));
        }
        Ok(rec)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RECORD_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }

    /// Adds or replaces a manifest entry from the file's current contents.
    pub fn register_output(&mut self, dir: &Path, file: &str) -> Result<()> {
        let path = dir.join(file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let entry = OutputEntry {
            file: file.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        };
        match self.outputs.iter_mut().find(|o| o.file == file) {
            Some(o) => *o = entry,
            None => self.outputs.push(entry),
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Everything the report files are generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub run_id: String,
    pub config_hash: String,
    pub command: String,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub errors: Vec<ErrorRow>,
    #[serde(default)]
    pub fits: Vec<SlopeFit>,
    #[serde(default)]
    pub streams: Vec<StreamAudit>,
    #[serde(default)]
    pub rates: Vec<RateRow>,
    #[serde(default)]
    pub probes: Vec<ProbeRow>,
    pub event_rate: Option<f64>,
    pub final_ratio: Option<f64>,
    pub mixing: Option<MixingReport>,
    pub picard: Option<PicardReport>,
    pub verdicts: BTreeMap<String, bool>,
    pub notes: Vec<String>,
    /// Unix seconds; absent in deterministic mode.
    pub generated_at: Option<u64>,
}

impl Summary {
    pub fn new(record: &RunRecord) -> Self {
        Summary {
            run_id: record.run_id.clone(),
            config_hash: record.config_hash.clone(),
            command: record.command.clone(),
            kind: record.config.experiment.kind,
            errors: Vec::new(),
            fits: Vec::new(),
            streams: Vec::new(),
            rates: Vec::new(),
            probes: Vec::new(),
            event_rate: None,
            final_ratio: None,
            mixing: None,
            picard: None,
            verdicts: BTreeMap::new(),
            notes: Vec::new(),
            generated_at: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.verdicts.values().all(|v| *v)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(SUMMARY_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| x.to_string())
}

/// `errors.csv` with one `# slope,<gamma>,<slope>` footer line per fit.
pub fn errors_csv(rows: &[ErrorRow], fits: &[SlopeFit]) -> String {
    let mut s = String::from("delta,epsilon,gamma,n_mc,err_mean,err_stderr\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.delta,
            r.epsilon,
            r.gamma,
            r.n_mc,
            opt(r.err_mean),
            opt(r.err_stderr)
        );
    }
    if !rows.is_empty() {
        for f in fits {
            let slope = f.slope.map_or_else(|| "undefined".into(), |v| v.to_string());
            let _ = writeln!(s, "# slope,{},{slope}", f.gamma);
        }
    }
    s
}

pub fn rates_csv(rows: &[RateRow]) -> String {
    let mut s = String::from("target_id,I,residual,converged\n");
    for r in rows {
        let rate = r.rate.map_or_else(|| "inf".into(), |v| v.to_string());
        let _ = writeln!(s, "{},{rate},{},{}", r.target_id, opt(r.residual), r.converged);
    }
    s
}

pub fn probes_csv(rows: &[ProbeRow]) -> String {
    let mut s = String::from("epsilon,delta,hits,trials,p_hat,ci_low,ci_high,neg_eps_log_p,neg_eps_log_upper\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.epsilon,
            r.delta,
            r.hits,
            r.trials,
            r.p_hat,
            r.ci_low,
            r.ci_high,
            opt(r.neg_eps_log_p),
            r.neg_eps_log_upper
        );
    }
    s
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 50.0;

/// Log-log plot of error against delta with one fitted line per gamma.
/// `None` when no positive error exists.
pub fn error_plot_svg(rows: &[ErrorRow], fits: &[SlopeFit], timestamp: Option<u64>) -> Option<String> {
    let pts: Vec<(f64, f64, f64)> = rows
        .iter()
        .filter_map(|r| r.err_mean.filter(|e| *e > 0.0).map(|e| (r.gamma, r.delta.log10(), e.log10())))
        .collect();
    if pts.is_empty() {
        return None;
    }
    let bounds = |f: fn(&(f64, f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min).floor();
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max).ceil();
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 1.0, hi + 1.0)
        }
    };
    let (x0, x1) = bounds(|p| p.1);
    let (y0, y1) = bounds(|p| p.2);
    let sx = |v: f64| PAD + (v - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - (v - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    if let Some(t) = timestamp {
        let _ = writeln!(s, "<!-- generated at unix {t} -->");
    }
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    for d in (x0 as i64)..=(x1 as i64) {
        let x = sx(d as f64);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" font-size="11" text-anchor="middle">1e{d}</text>"#,
            H - PAD + 16.0
        );
    }
    for d in (y0 as i64)..=(y1 as i64) {
        let y = sy(d as f64);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{y:.2}" font-size="11" text-anchor="end">1e{d}</text>"#,
            PAD - 6.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">delta</text>"#,
        W / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" font-size="12" transform="rotate(-90 14 {:.2})" text-anchor="middle">E sup error</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (_, x, y) in &pts {
        let _ = writeln!(
            s,
            r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="4" fill="steelblue"/>"#,
            sx(*x),
            sy(*y)
        );
    }
    for f in fits {
        let (Some(slope), Some(icpt)) = (f.slope, f.intercept) else { continue };
        let xs: Vec<f64> = pts.iter().filter(|p| p.0 == f.gamma).map(|p| p.1).collect();
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // The fit lives in natural logs; log10 e = slope log10 d + icpt / ln 10.
        let line = |v: f64| slope * v + icpt / std::f64::consts::LN_10;
        let _ = writeln!(
            s,
            r#"<line class="fit" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="firebrick"/>"#,
            sx(lo),
            sy(line(lo)),
            sx(hi),
            sy(line(hi))
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11">gamma {} slope {slope:.4}</text>"#,
            PAD + 8.0,
            PAD + 14.0,
            f.gamma
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}

/// Writes the report files for `summary` into `dir`, registers them in the
/// record's manifest and saves the record last.
pub fn emit_report(summary: &Summary, record: &mut RunRecord, dir: &Path, deterministic: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut summary = summary.clone();
    summary.generated_at = if deterministic {
        None
    } else {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .ok()
            .map(|d| d.as_secs())
    };
    let tabular = summary.command == "converge" || summary.command == "ldp";
    if tabular && summary.errors.is_empty() && summary.rates.is_empty() && !summary.notes.iter().any(|n| n == "no data") {
        summary.notes.push("no data".into());
    }
    let mut files = Vec::new();
    if summary.command == "converge" || !summary.errors.is_empty() {
        write_file(&dir.join("errors.csv"), errors_csv(&summary.errors, &summary.fits).as_bytes())?;
        files.push("errors.csv");
        let plot = dir.join("plot.svg");
        match error_plot_svg(&summary.errors, &summary.fits, summary.generated_at) {
            Some(svg) => {
                write_file(&plot, svg.as_bytes())?;
                files.push("plot.svg");
            }
            None => {
                if plot.exists() {
                    std::fs::remove_file(&plot).map_err(|e| Error::io(&plot, e))?;
                }
            }
        }
    }
    if summary.command == "ldp" || !summary.rates.is_empty() {
        write_file(&dir.join("rates.csv"), rates_csv(&summary.rates).as_bytes())?;
        files.push("rates.csv");
        if !summary.probes.is_empty() {
            write_file(&dir.join("probes.csv"), probes_csv(&summary.probes).as_bytes())?;
            files.push("probes.csv");
        }
    }
    write_file(&dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    files.push(SUMMARY_FILE);
    for f in files {
        record.register_output(dir, f)?;
    }
    record.save(dir)?;
    Ok(())
}
