//! Region score maps as a text matrix and as a binary 8-bit PGM, one pixel per region.

use std::path::Path;

use pathflip_core::grounding::{score_to_gray, RegionScoreMap};

use super::{invalid, read_string, write, Result};

/// `grid <cols> <rows>` then one line of scores per grid row.
pub fn to_text(map: &RegionScoreMap) -> String {
    let (cols, rows) = map.grid;
    let mut s = format!("grid {cols} {rows}\n");
    for r in 0..rows {
        let line: Vec<String> = map.scores[r * cols..(r + 1) * cols].iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// Grid and scores from [`to_text`] output.
pub fn parse_text(path: &Path, text: &str) -> Result<((usize, usize), Vec<f64>)> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    let grid = match header.as_slice() {
        ["grid", c, r] => (
            c.parse().map_err(|_| invalid(path, "bad column count"))?,
            r.parse().map_err(|_| invalid(path, "bad row count"))?,
        ),
        _ => return Err(invalid(path, "missing `grid <cols> <rows>` header")),
    };
    let scores: Vec<f64> = lines
        .flat_map(str::split_whitespace)
        .map(|t| t.parse().map_err(|_| invalid(path, format!("bad score {t:?}"))))
        .collect::<Result<_>>()?;
    if scores.len() != grid.0 * grid.1 {
        return Err(invalid(path, format!("{} scores for grid {grid:?}", scores.len())));
    }
    Ok((grid, scores))
}

pub fn to_pgm(map: &RegionScoreMap) -> Vec<u8> {
    let (cols, rows) = map.grid;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(map.scores.iter().map(|&s| score_to_gray(s)));
    out
}

/// Writes `<stem>.txt` and `<stem>.pgm`.
pub fn save(stem: &Path, map: &RegionScoreMap) -> Result<()> {
    write(&stem.with_extension("txt"), to_text(map).as_bytes())?;
    write(&stem.with_extension("pgm"), &to_pgm(map))
}

pub fn load_text(path: &Path) -> Result<((usize, usize), Vec<f64>)> {
    parse_text(path, &read_string(path)?)
}
