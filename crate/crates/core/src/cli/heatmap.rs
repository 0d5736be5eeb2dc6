//! Attention matrices as CSV and binary greyscale PGM (black 0, white 1).

/// One line per output step, one column per source position; shortest
/// round-trip float formatting.
pub fn attention_csv(rows: &[Vec<f64>]) -> String {
    rows.iter()
        .map(|r| {
            let cells: Vec<String> = r.iter().map(f64::to_string).collect();
            cells.join(",") + "\n"
        })
        .collect()
}

pub fn pixel(w: f64) -> u8 {
    (255.0 * w.clamp(0.0, 1.0)).round() as u8
}

/// P5 image, rows = output steps, columns = source positions.
pub fn attention_pgm(rows: &[Vec<f64>]) -> Vec<u8> {
    let width = rows.first().map_or(0, Vec::len);
    let mut out = format!("P5\n{width} {}\n255\n", rows.len()).into_bytes();
    for r in rows {
        out.extend(r.iter().map(|&w| pixel(w)));
    }
    out
}
