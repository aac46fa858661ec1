//! CSV writers for attention maps and score tables.

use std::fmt::Write as _;

use crate::capture::AttentionCapture;
use crate::criteria::ImportanceScore;
use crate::error::Result;

/// `layer,head,row,col,value`, one line per cell of every averaged map.
/// `head` is the original head id, `col` the original key position.
pub fn attention_csv(capture: &AttentionCapture) -> Result<String> {
    let mut out = String::from("layer,head,row,col,value\n");
    for l in 0..capture.layers() {
        let lc = capture.layer(l);
        for h in 0..capture.heads(l) {
            let map = capture.map(l, h)?;
            for r in 0..map.rows {
                for (c, v) in map.row(r).iter().enumerate() {
                    writeln!(out, "{l},{},{r},{},{v:.9e}", lc.head_ids[h], lc.kv_indices[c]).unwrap();
                }
            }
        }
    }
    Ok(out)
}

/// `kind,layer,unit,raw,weighted`
pub fn scores_csv(scores: &[ImportanceScore]) -> String {
    let mut out = String::from("kind,layer,unit,raw,weighted\n");
    for s in scores {
        writeln!(out, "{},{},{},{:.12e},{:.12e}", s.kind, s.layer, s.unit, s.raw, s.weighted).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::UnitKind;

    #[test]
    fn score_rows() {
        let s = ImportanceScore::new(UnitKind::Token, 2, 5, 0.25);
        let csv = scores_csv(&[s]);
        assert_eq!(csv.lines().nth(1).unwrap(), "token,2,5,2.500000000000e-1,2.500000000000e-1");
    }
}
