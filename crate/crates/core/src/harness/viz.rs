use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::error::{contract, Result};
use crate::model::{DlgMoeModel, EncodeOptions};
use crate::tensor::Tape;

/// Pixels per frame horizontally and per strip vertically.
const CELL_W: usize = 4;
const STRIP_H: usize = 12;
const GAP_H: usize = 2;

const PALETTE: [[u8; 3]; 6] = [
    [220, 30, 30],
    [30, 180, 60],
    [40, 80, 220],
    [230, 180, 20],
    [150, 50, 170],
    [20, 170, 170],
];
const GAP: [u8; 3] = [255, 255, 255];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteViz {
    /// Routing of the first language-group layer.
    pub routed: Vec<usize>,
    pub truth: Vec<usize>,
    /// Two lines, `route ` then `truth `, one character per frame.
    pub ascii: String,
}

fn glyph(model: &DlgMoeModel, lang: usize) -> char {
    model
        .config
        .language_names
        .get(lang)
        .and_then(|n| n.chars().next())
        .map(|c| c.to_ascii_uppercase())
        .unwrap_or_else(|| char::from_digit(lang as u32 % 36, 36).unwrap_or('?'))
}

/// Binary PPM with the routed strip on top and ground truth below.
pub fn render_ppm(routed: &[usize], truth: &[usize]) -> Vec<u8> {
    let t = routed.len().max(truth.len());
    let (w, h) = (t * CELL_W, 2 * STRIP_H + GAP_H);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let color = |strip: &[usize], x: usize| strip.get(x / CELL_W).map_or(GAP, |&l| PALETTE[l % PALETTE.len()]);
    for y in 0..h {
        for x in 0..w {
            let c = if y < STRIP_H {
                color(routed, x)
            } else if y < STRIP_H + GAP_H {
                GAP
            } else {
                color(truth, x)
            };
            out.extend_from_slice(&c);
        }
    }
    out
}

/// Writes `path` (PPM) and `path` with a `.txt` extension (ASCII strips).
pub fn route_viz(model: &DlgMoeModel, utt: &Utterance, path: &Path, k: usize) -> Result<RouteViz> {
    if model.groups.is_empty() {
        return Err(contract("model has no language-group layer to visualize"));
    }
    let mut tape = Tape::inference();
    let opts = EncodeOptions {
        mode: model.training_mode(),
        k,
        override_lang: None,
    };
    let enc = model.encode(&mut tape, &utt.feats, &opts)?;
    let routed = enc.routing_tables[0].lang_ids.clone();
    let line = |s: &[usize]| s.iter().map(|&l| glyph(model, l)).collect::<String>();
    let ascii = format!("route {}\ntruth {}\n", line(&routed), line(&utt.true_frame_lang));
    std::fs::write(path, render_ppm(&routed, &utt.true_frame_lang))?;
    std::fs::write(path.with_extension("txt"), &ascii)?;
    Ok(RouteViz {
        routed,
        truth: utt.true_frame_lang.clone(),
        ascii,
    })
}
