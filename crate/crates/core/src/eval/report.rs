use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::eer::EerResult;
use super::scoring::ReportCondition;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub condition: ReportCondition,
    pub system: String,
    pub result: EerResult,
}

impl ReportRow {
    /// EER in percent with one decimal.
    pub fn eer_percent(&self) -> String {
        format!("{:.1}", 100.0 * self.result.eer)
    }
}

/// EER table with rows grouped by condition (AA, VV, AVAV, fusion, AV_X,
/// A_AV, V_AV) and sorted by system within a condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

const HEADER: [&str; 5] = ["condition", "system", "EER (%)", "targets", "nontargets"];

impl Report {
    fn cells(&self) -> Vec<[String; 5]> {
        self.rows
            .iter()
            .map(|r| {
                [
                    r.condition.to_string(),
                    r.system.clone(),
                    r.eer_percent(),
                    r.result.num_target.to_string(),
                    r.result.num_nontarget.to_string(),
                ]
            })
            .collect()
    }

    pub fn text(&self) -> String {
        let cells = self.cells();
        let mut widths = HEADER.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let mut line = |row: [&str; 5]| {
            let _ = writeln!(
                out,
                "{:<w0$}  {:<w1$}  {:>w2$}  {:>w3$}  {:>w4$}",
                row[0],
                row[1],
                row[2],
                row[3],
                row[4],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3],
                w4 = widths[4]
            );
        };
        line(HEADER);
        for row in &cells {
            line([&row[0], &row[1], &row[2], &row[3], &row[4]].map(String::as_str));
        }
        out.lines().map(str::trim_end).fold(String::new(), |mut s, l| {
            s.push_str(l);
            s.push('\n');
            s
        })
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("condition,system,eer_percent,targets,nontargets\n");
        for row in self.cells() {
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

pub fn report_table(results: &BTreeMap<(String, ReportCondition), EerResult>) -> Report {
    let mut rows: Vec<ReportRow> = results
        .iter()
        .map(|((system, condition), result)| ReportRow {
            condition: *condition,
            system: system.clone(),
            result: *result,
        })
        .collect();
    rows.sort_by(|a, b| a.condition.cmp(&b.condition).then_with(|| a.system.cmp(&b.system)));
    Report { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Condition;

    fn result(eer: f64) -> EerResult {
        EerResult {
            eer,
            threshold: 0.5,
            num_target: 10,
            num_nontarget: 12,
        }
    }

    #[test]
    fn empty_report_has_only_headers() {
        let r = report_table(&BTreeMap::new());
        assert_eq!(r.text(), "condition  system  EER (%)  targets  nontargets\n");
        assert_eq!(r.csv(), "condition,system,eer_percent,targets,nontargets\n");
    }

    #[test]
    fn rows_follow_condition_then_system_order() {
        let mut m = BTreeMap::new();
        m.insert(("mv".to_string(), ReportCondition::Trial(Condition::AvX)), result(0.3));
        m.insert(("b".to_string(), ReportCondition::Trial(Condition::AA)), result(0.0071));
        m.insert(("a+v".to_string(), ReportCondition::Fusion), result(0.02));
        m.insert(("a".to_string(), ReportCondition::Trial(Condition::AA)), result(0.05));
        let r = report_table(&m);
        let order: Vec<_> = r.rows.iter().map(|r| (r.condition.tag(), r.system.as_str())).collect();
        assert_eq!(order, [("AA", "a"), ("AA", "b"), ("fusion", "a+v"), ("AV_X", "mv")]);
        assert_eq!(r.rows[1].eer_percent(), "0.7");
        let csv = r.csv();
        assert!(csv.contains("AA,b,0.7,10,12"));
        for row in &r.rows {
            assert!(r.text().contains(&row.eer_percent()));
        }
    }
}
