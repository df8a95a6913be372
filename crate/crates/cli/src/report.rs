//! Evaluation reports: a deterministic JSON-lines file plus a console
//! table. Wall-clock timing is printed to the console only, so report
//! bytes depend on nothing but the inputs.

use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRow {
    pub utt: String,
    pub lsd_out: f64,
    pub lsd_in: Option<f64>,
    pub visqol_out: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config_hash: String,
    pub fft_size: usize,
    pub hop: usize,
    pub floor: f64,
    pub rows: Vec<UtteranceRow>,
    pub unpaired: Vec<String>,
}

impl EvalReport {
    pub fn mean_lsd_out(&self) -> f64 {
        self.rows.iter().map(|r| r.lsd_out).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_lsd_in(&self) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter_map(|r| r.lsd_in).collect();
        if vals.len() == self.rows.len() && !vals.is_empty() {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        } else {
            None
        }
    }

    pub fn mean_visqol(&self) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter_map(|r| r.visqol_out).collect();
        if vals.len() == self.rows.len() && !vals.is_empty() {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        } else {
            None
        }
    }

    /// Machine-readable JSON lines: one config record, one record per
    /// utterance, one aggregate record. Field order is fixed.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{{\"record\":\"config\",\"config_hash\":\"{}\",\"fft_size\":{},\"hop\":{},\"floor\":{}}}",
            self.config_hash, self.fft_size, self.hop, self.floor
        );
        for row in &self.rows {
            let mut line = format!(
                "{{\"record\":\"utterance\",\"utt\":\"{}\",\"lsd_out\":{}",
                row.utt, row.lsd_out
            );
            if let Some(v) = row.lsd_in {
                let _ = write!(line, ",\"lsd_in\":{v}");
            }
            if let Some(v) = row.visqol_out {
                let _ = write!(line, ",\"visqol_out\":{v}");
            }
            line.push('}');
            let _ = writeln!(out, "{line}");
        }
        for name in &self.unpaired {
            let _ = writeln!(out, "{{\"record\":\"unpaired\",\"utt\":\"{name}\"}}");
        }
        let mut agg = format!(
            "{{\"record\":\"aggregate\",\"count\":{},\"mean_lsd_out\":{}",
            self.rows.len(),
            self.mean_lsd_out()
        );
        if let Some(v) = self.mean_lsd_in() {
            let _ = write!(agg, ",\"mean_lsd_in\":{v}");
        }
        if let Some(v) = self.mean_visqol() {
            let _ = write!(agg, ",\"mean_visqol\":{v}");
        }
        agg.push('}');
        let _ = writeln!(out, "{agg}");
        out
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let has_in = self.rows.iter().all(|r| r.lsd_in.is_some());
        let has_visqol = self.rows.iter().all(|r| r.visqol_out.is_some());
        let _ = write!(out, "{:<16} {:>10}", "utterance", "LSD(out)");
        if has_in {
            let _ = write!(out, " {:>10}", "LSD(in)");
        }
        if has_visqol {
            let _ = write!(out, " {:>12}", "ViSQOL(out)");
        }
        let _ = writeln!(out);
        for row in &self.rows {
            let _ = write!(out, "{:<16} {:>10.4}", row.utt, row.lsd_out);
            if has_in {
                let _ = write!(out, " {:>10.4}", row.lsd_in.unwrap());
            }
            if has_visqol {
                let _ = write!(out, " {:>12.4}", row.visqol_out.unwrap());
            }
            let _ = writeln!(out);
        }
        let _ = write!(out, "{:<16} {:>10.4}", "mean", self.mean_lsd_out());
        if let Some(v) = self.mean_lsd_in() {
            let _ = write!(out, " {:>10.4}", v);
        }
        if let Some(v) = self.mean_visqol() {
            let _ = write!(out, " {:>12.4}", v);
        }
        let _ = writeln!(out);
        for name in &self.unpaired {
            let _ = writeln!(out, "unpaired: {name}");
        }
        out
    }
}
