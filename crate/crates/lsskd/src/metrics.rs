//! `metrics.csv`: one header line and one row per completed epoch.

use lsskd_core::train::EpochMetrics;

pub const HEADER: &str = "epoch,lr,train_total,ls_loss,is_loss,test_top1,test_top5,wall_s";

/// Floats use the shortest representation that parses back to the same value.
pub fn row(m: &EpochMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        m.epoch, m.lr, m.train_total, m.ls_loss, m.is_loss, m.test_top1, m.test_top5, m.wall_s
    )
}

pub fn render(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for m in rows {
        s.push_str(&row(m));
        s.push('\n');
    }
    s
}

pub fn parse(text: &str) -> Result<Vec<EpochMetrics>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err("missing or unexpected metrics header".into());
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(format!("row {}: {} fields", i + 1, f.len()));
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|_| format!("row {}: bad number {:?}", i + 1, f[j]));
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|_| format!("row {}: bad epoch {:?}", i + 1, f[0]))?,
                lr: num(1)?,
                train_total: num(2)?,
                ls_loss: num(3)?,
                is_loss: num(4)?,
                test_top1: num(5)?,
                test_top5: num(6)?,
                wall_s: num(7)?,
            })
        })
        .collect()
}
