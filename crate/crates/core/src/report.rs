//! Text output helpers shared by the command-line reports.

use crate::flow::{FlowSummary, MaskProbeResult, PeakRatio};

/// `%.9g`-style formatting: 9 significant digits, trailing zeros dropped,
/// scientific notation outside `1e-5 <= |x| < 1e9`.
pub fn sig9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..9).contains(&exp) {
        return format!(
            "{}e{}{:02}",
            trim(mantissa),
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        );
    }
    let decimals = (8 - exp).max(0) as usize;
    trim(&format!("{x:.decimals$}")).to_string()
}

fn trim(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn flow_csv(rows: &[FlowSummary]) -> String {
    let mut out = String::from("layer,vision_to_vision,vision_to_text\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.layer,
            sig9(r.vision_to_vision),
            sig9(r.vision_to_text)
        ));
    }
    out
}

pub fn probe_csv(rows: &[MaskProbeResult]) -> String {
    let mut out = String::from("mask_start_layer,jsd,log_jsd\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.mask_start_layer,
            sig9(r.jsd),
            sig9(r.log_jsd)
        ));
    }
    out
}

pub fn peaks_csv(rows: &[PeakRatio]) -> String {
    let mut out = String::from("layer,head,ratio\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.layer, r.head, sig9(r.ratio)));
    }
    out
}

/// Parse a JSON-lines file; blank lines are skipped and errors name the line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> crate::Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| crate::Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
