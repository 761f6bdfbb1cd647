//! Saliency report rendering: tokens colorized by signed gradient
//! saliency, green for positive influence on the predicted class's
//! probability and red for negative, with intensity proportional to the
//! token's normalized saliency within its sentence.

use std::fmt;
use std::str::FromStr;

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::metrics::{self, SaliencyMap};
use crate::model::{Batch, Model};

/// Output encodings for [`saliency_report`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Ansi,
    Html,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<ReportFormat> {
        match s {
            "ansi" => Ok(ReportFormat::Ansi),
            "html" => Ok(ReportFormat::Html),
            other => Err(Error::Config(format!("unknown report format `{other}`; use ansi or html"))),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Ansi => "ansi",
            ReportFormat::Html => "html",
        })
    }
}

/// Renders every model's saliency maps over the same sentences. Each
/// sentence is scored alone (its own single-row batch), so adding or
/// removing sentences never changes another sentence's row. HTML output is
/// self-checked with the tag-balance validator before it is returned.
pub fn saliency_report(
    models: &[(String, &Model)],
    sentences: &[Vec<usize>],
    vocab: &Vocab,
    format: ReportFormat,
) -> Result<String> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("saliency report needs at least one model".into()));
    }
    if sentences.is_empty() {
        return Err(Error::InvalidArgument("saliency report needs at least one sentence".into()));
    }
    let mut sections: Vec<(&str, Vec<SaliencyMap>)> = Vec::with_capacity(models.len());
    for (name, model) in models {
        let mut maps = Vec::with_capacity(sentences.len());
        for sentence in sentences {
            let batch = Batch::new(&[sentence.clone()], &[0], None)?;
            maps.push(metrics::grad_saliency(model, &batch, vocab)?.remove(0));
        }
        sections.push((name.as_str(), maps));
    }
    match format {
        ReportFormat::Ansi => Ok(render_ansi(&sections)),
        ReportFormat::Html => {
            let html = render_html(&sections);
            check_html_balanced(&html)?;
            Ok(html)
        }
    }
}

/// Per-token display intensity in [0, 1]: the sentence's top-scoring token
/// renders at full strength, everything else proportionally dimmer.
fn intensities(map: &SaliencyMap) -> Vec<f64> {
    let max = map.scores.iter().cloned().fold(0.0, f64::max);
    map.scores.iter().map(|s| if max > 0.0 { s / max } else { 0.0 }).collect()
}

fn render_ansi(sections: &[(&str, Vec<SaliencyMap>)]) -> String {
    let mut out = String::new();
    for (name, maps) in sections {
        out.push_str(&format!("== {name} ==\n"));
        for map in maps {
            out.push_str(&format!("[pred {} p={:.3}] ", map.predicted_class, map.max_prob));
            for ((token, &sign), intensity) in
                map.tokens.iter().zip(&map.signs).zip(intensities(map))
            {
                let channel = 128 + (127.0 * intensity).round() as u8;
                match sign.partial_cmp(&0.0) {
                    Some(std::cmp::Ordering::Greater) => {
                        out.push_str(&format!("\x1b[38;2;0;{channel};0m{token}\x1b[0m "))
                    }
                    Some(std::cmp::Ordering::Less) => {
                        out.push_str(&format!("\x1b[38;2;{channel};0;0m{token}\x1b[0m "))
                    }
                    _ => out.push_str(&format!("{token} ")),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render_html(sections: &[(&str, Vec<SaliencyMap>)]) -> String {
    let mut out = String::from(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n\
         <title>Gradient saliency</title>\n<style>\n\
         body { font-family: monospace; }\n\
         .tok { padding: 1px 3px; border-radius: 3px; }\n\
         .meta { color: #555555; }\n\
         </style>\n</head>\n<body>\n<h1>Gradient saliency</h1>\n",
    );
    for (name, maps) in sections {
        out.push_str(&format!("<section>\n<h2>{}</h2>\n", escape(name)));
        for map in maps {
            out.push_str(&format!(
                "<p><span class=\"meta\">pred {} (p={:.3})</span>",
                map.predicted_class, map.max_prob
            ));
            for ((token, &sign), intensity) in
                map.tokens.iter().zip(&map.signs).zip(intensities(map))
            {
                let alpha = 0.1 + 0.9 * intensity;
                let color = match sign.partial_cmp(&0.0) {
                    Some(std::cmp::Ordering::Greater) => format!("rgba(0,150,0,{alpha:.3})"),
                    Some(std::cmp::Ordering::Less) => format!("rgba(200,0,0,{alpha:.3})"),
                    _ => "rgba(128,128,128,0.1)".to_string(),
                };
                out.push_str(&format!(
                    " <span class=\"tok\" style=\"background-color:{color}\">{}</span>",
                    escape(token)
                ));
            }
            out.push_str("</p>\n");
        }
        out.push_str("</section>\n");
    }
    out.push_str("</body>\n</html>\n");
    out
}

/// Minimal tag-balance validator used as the oracle for emitted HTML:
/// every opening tag must be closed in order. Doctype and comments are
/// skipped, void elements don't stack, and attribute values are assumed
/// not to contain angle brackets (true for everything this module emits).
pub fn check_html_balanced(html: &str) -> Result<()> {
    const VOID: [&str; 6] = ["meta", "br", "hr", "img", "link", "input"];
    let bad = |msg: String| Err(Error::InvalidArgument(format!("malformed html: {msg}")));
    let mut stack: Vec<String> = Vec::new();
    let mut rest = html;
    while let Some(start) = rest.find('<') {
        let after = &rest[start + 1..];
        let Some(end) = after.find('>') else {
            return bad("unterminated tag".into());
        };
        let tag = &after[..end];
        rest = &after[end + 1..];
        if tag.starts_with('!') {
            continue;
        }
        let closing = tag.starts_with('/');
        let name: String = tag
            .trim_start_matches('/')
            .chars()
            .take_while(|c| c.is_ascii_alphanumeric())
            .collect();
        if name.is_empty() {
            return bad(format!("empty tag name in <{tag}>"));
        }
        if closing {
            match stack.pop() {
                Some(open) if open == name => {}
                Some(open) => return bad(format!("</{name}> closes <{open}>")),
                None => return bad(format!("</{name}> with nothing open")),
            }
        } else if !tag.ends_with('/') && !VOID.contains(&name.as_str()) {
            stack.push(name);
        }
    }
    match stack.pop() {
        Some(open) => bad(format!("<{open}> never closed")),
        None => Ok(()),
    }
}
