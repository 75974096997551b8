//! Per-byte rendering of router weights and middle-stack selection.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{LanguageModel, Routing, SynergyModel};
use crate::corpus::SpecialTokens;
use crate::router::RoutingState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VizRecord {
    pub text_bytes: Vec<u8>,
    pub w: Vec<f32>,
    pub m: Vec<bool>,
    pub sigma: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VizFormat {
    Html,
    Ansi,
}

impl std::str::FromStr for VizFormat {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "html" => Ok(Self::Html),
            "ansi" => Ok(Self::Ansi),
            _ => Err(invalid(format!("unknown format {s:?} (expected html or ansi)"))),
        }
    }
}

impl VizRecord {
    /// Builds a record from the routing of a `bos + text` row, dropping
    /// the bos position.
    pub fn from_routing(text: &[u8], state: &RoutingState<f32>) -> Result<Self> {
        let n = text.len();
        if state.w.len() < n + 1 {
            return Err(invalid("routing state shorter than text"));
        }
        Ok(Self {
            text_bytes: text.to_vec(),
            w: state.w[1..=n].to_vec(),
            m: state.mask[1..=n].to_vec(),
            sigma: state.sigma[1..=n].to_vec(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.text_bytes.len();
        if n == 0 {
            return Err(invalid("empty record"));
        }
        if self.w.len() != n || self.m.len() != n || self.sigma.len() != n {
            return Err(invalid("record fields differ in length"));
        }
        Ok(())
    }

    pub fn picked_fraction(&self) -> f64 {
        self.m.iter().filter(|&&b| b).count() as f64 / self.m.len().max(1) as f64
    }

    /// w mapped to [0, 1]; a constant record maps to 0.5.
    pub fn intensities(&self) -> Vec<f64> {
        let (lo, hi) = self
            .w
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
        self.w
            .iter()
            .map(|&v| if hi > lo { (v as f64 - lo) / (hi - lo) } else { 0.5 })
            .collect()
    }
}

/// Routes `text` through `model` in consecutive chunks of
/// `context_length - 1` bytes, each prefixed with bos.
pub fn route_text(model: &SynergyModel<f32>, text: &[u8], routing: Routing<f32>) -> Result<VizRecord> {
    if text.is_empty() {
        return Err(invalid("empty text"));
    }
    let bos = SpecialTokens::bytes().bos;
    let chunk = model.config().context_length - 1;
    let mut record = VizRecord {
        text_bytes: Vec::with_capacity(text.len()),
        w: Vec::with_capacity(text.len()),
        m: Vec::with_capacity(text.len()),
        sigma: Vec::with_capacity(text.len()),
    };
    for piece in text.chunks(chunk) {
        let ids: Vec<u32> = std::iter::once(bos).chain(piece.iter().map(|&b| b as u32)).collect();
        let ids = ndarray::Array2::from_shape_vec((1, ids.len()), ids).map_err(|e| invalid(e.to_string()))?;
        let out = model.forward(&ids, None, routing)?;
        let r = VizRecord::from_routing(piece, &out.routing[0])?;
        record.text_bytes.extend(r.text_bytes);
        record.w.extend(r.w);
        record.m.extend(r.m);
        record.sigma.extend(r.sigma);
    }
    Ok(record)
}

fn label(b: u8) -> String {
    if b.is_ascii_graphic() || b == b' ' {
        (b as char).to_string()
    } else {
        format!("\\x{b:02x}")
    }
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders one cell per byte. Deterministic in the record.
pub fn render_routing(record: &VizRecord, format: VizFormat) -> Result<String> {
    record.validate()?;
    let inten = record.intensities();
    let mut out = String::new();
    match format {
        VizFormat::Html => {
            out.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>router weights</title></head>\n");
            out.push_str("<body style=\"font-family:monospace\">\n<div>\n");
            for i in 0..record.text_bytes.len() {
                let a = inten[i];
                // white to dark green
                let r = (255.0 * (1.0 - a)) as u8;
                let g = (255.0 - 155.0 * a) as u8;
                let b = (255.0 * (1.0 - a)) as u8;
                let fg = if a > 0.6 { "#fff" } else { "#000" };
                let border = if record.m[i] { "2px solid #000" } else { "1px solid #ddd" };
                let weight = if record.m[i] { "bold" } else { "normal" };
                let _ = writeln!(
                    out,
                    "<span class=\"cell{}\" title=\"w={:.4} sigma={:.4}\" style=\"display:inline-block;min-width:0.7em;padding:1px;margin:1px;background:rgb({r},{g},{b});color:{fg};border:{border};font-weight:{weight}\">{}</span>",
                    if record.m[i] { " picked" } else { "" },
                    record.w[i],
                    record.sigma[i],
                    html_escape(&label(record.text_bytes[i]).replace(' ', "\u{a0}"))
                );
            }
            out.push_str("</div>\n</body></html>\n");
        }
        VizFormat::Ansi => {
            for i in 0..record.text_bytes.len() {
                let a = inten[i];
                let g = (255.0 - 155.0 * a) as u8;
                let rb = (255.0 * (1.0 - a)) as u8;
                let bold = if record.m[i] { "\x1b[1;4m" } else { "" };
                let _ = write!(out, "\x1b[48;2;{rb};{g};{rb}m\x1b[38;2;0;0;0m{bold}{}\x1b[0m", label(record.text_bytes[i]));
            }
            out.push('\n');
        }
    }
    Ok(out)
}
