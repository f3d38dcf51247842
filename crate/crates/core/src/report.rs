//! Output helpers: content hashes, run manifests and SVG bar charts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a command: the resolved config, its hash, and
/// hashes of the files it read and wrote.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub config: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

impl Manifest {
    pub fn new(command: &str, config_toml: &str) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(config_toml.as_bytes()),
            config: config_toml.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn entry(dir: &Path, path: &Path) -> Result<FileHash> {
        let shown = path.strip_prefix(dir).unwrap_or(path);
        Ok(FileHash {
            path: shown.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }

    pub fn add_input(&mut self, dir: &Path, path: &Path) -> Result<()> {
        self.inputs.push(Self::entry(dir, path)?);
        Ok(())
    }

    pub fn add_output(&mut self, dir: &Path, path: &Path) -> Result<()> {
        self.outputs.push(Self::entry(dir, path)?);
        Ok(())
    }

    /// Writes `manifest-<command>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("manifest-{}.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bar {
    pub label: String,
    pub value: f64,
    pub low: f64,
    pub high: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BarGroup {
    pub label: String,
    pub bars: Vec<Bar>,
}

const PALETTE: [&str; 6] = ["#7f7f7f", "#d62728", "#ff7f0e", "#1f77b4", "#2ca02c", "#9467bd"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bars on a `[0, 1]` axis with whiskers from `low` to `high`.
/// Bar colours follow the bar's position inside its group.
pub fn bar_chart_svg(title: &str, groups: &[BarGroup]) -> String {
    let n_bars = groups.iter().map(|g| g.bars.len()).max().unwrap_or(0).max(1);
    let (left, top, plot_h, bar_w, gap) = (50.0, 40.0, 240.0, 22.0, 30.0);
    let group_w = n_bars as f64 * bar_w + gap;
    let width = left + groups.len().max(1) as f64 * group_w + 20.0;
    let legend_y = top + plot_h + 45.0;
    let height = legend_y + 20.0;
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, esc(title));
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
            width - 20.0,
            y(v),
            y(v),
            left - 6.0,
            y(v) + 4.0
        );
    }
    for (gi, g) in groups.iter().enumerate() {
        let x0 = left + gi as f64 * group_w + gap / 2.0;
        for (bi, b) in g.bars.iter().enumerate() {
            let x = x0 + bi as f64 * bar_w;
            let colour = PALETTE[bi % PALETTE.len()];
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{colour}"><title>{} {:.3}</title></rect>"#,
                y(b.value),
                bar_w - 2.0,
                y(0.0) - y(b.value),
                esc(&b.label),
                b.value
            );
            let cx = x + (bar_w - 2.0) / 2.0;
            let _ = writeln!(
                s,
                r#"<path d="M{cx:.1} {:.1}V{:.1}M{:.1} {:.1}h8M{:.1} {:.1}h8" stroke="black" fill="none"/>"#,
                y(b.low),
                y(b.high),
                cx - 4.0,
                y(b.low),
                cx - 4.0,
                y(b.high)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + n_bars as f64 * bar_w / 2.0,
            top + plot_h + 16.0,
            esc(&g.label)
        );
    }
    if let Some(first) = groups.first() {
        for (bi, b) in first.bars.iter().enumerate() {
            let x = left + bi as f64 * 90.0;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                legend_y - 9.0,
                PALETTE[bi % PALETTE.len()],
                x + 14.0,
                legend_y,
                esc(&b.label)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn chart_has_one_rect_per_bar() {
        let bar = |l: &str, v| Bar {
            label: l.into(),
            value: v,
            low: v - 0.1,
            high: v + 0.1,
        };
        let svg = bar_chart_svg(
            "a < b",
            &[BarGroup {
                label: "umaze".into(),
                bars: vec![bar("none", 0.4), bar("mgda", 0.7)],
            }],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("a &lt; b"));
        assert_eq!(svg.matches("<rect").count(), 4);
    }
}
