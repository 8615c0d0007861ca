//! Pareto tables, scatter data, SVG plots and the deployment shortlist.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::cost::Precision;
use crate::error::{Error, Result};
use crate::explorer::{pareto_front, Axis, ParetoFront, ResultRecord};

/// Largest balanced-accuracy drop from Top allowed for the `-H` picks.
pub const MAX_DROP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub label: String,
    pub record: ResultRecord,
}

fn pick<'a>(
    records: &[&'a ResultRecord],
    key: impl Fn(&ResultRecord) -> u64,
) -> Option<&'a ResultRecord> {
    records.iter().copied().min_by(|a, b| {
        key(a)
            .cmp(&key(b))
            .then(b.bal_acc().total_cmp(&a.bal_acc()))
            .then(a.spec.render().cmp(&b.spec.render()))
    })
}

/// Top, Size-H, MAC-H, Size-L and MAC-L for one precision.
///
/// Top has the best balanced accuracy; `-L` picks are the smallest / cheapest
/// overall; `-H` picks are the smallest / cheapest within [`MAX_DROP`] of Top.
pub fn select_models(records: &[ResultRecord], precision: Precision) -> Result<Vec<Selection>> {
    let ok: Vec<&ResultRecord> = records
        .iter()
        .filter(|r| r.is_ok() && r.precision == precision)
        .collect();
    let top = ok
        .iter()
        .copied()
        .min_by(|a, b| {
            b.bal_acc()
                .total_cmp(&a.bal_acc())
                .then(a.cost.macs.cmp(&b.cost.macs))
                .then(a.spec.render().cmp(&b.spec.render()))
        })
        .ok_or_else(|| Error::Empty(format!("no {precision} results")))?;
    let near: Vec<&ResultRecord> = ok
        .iter()
        .copied()
        .filter(|r| r.bal_acc() >= top.bal_acc() - MAX_DROP)
        .collect();
    let suffix = if precision == Precision::Int8 {
        "-Q"
    } else {
        ""
    };
    let size = |r: &ResultRecord| r.cost.size_bytes;
    let macs = |r: &ResultRecord| r.cost.macs;
    let rows = [
        ("Top", Some(top)),
        ("Size-H", pick(&near, size)),
        ("MAC-H", pick(&near, macs)),
        ("Size-L", pick(&ok, size)),
        ("MAC-L", pick(&ok, macs)),
    ];
    Ok(rows
        .into_iter()
        .map(|(label, r)| Selection {
            label: format!("{label}{suffix}"),
            record: r.expect("non-empty candidate set").clone(),
        })
        .collect())
}

fn pct(v: (f64, f64)) -> String {
    format!("{:.2}±{:.2}", 100.0 * v.0, 100.0 * v.1)
}

fn pm(v: (f64, f64)) -> String {
    format!("{:.2}±{:.2}", v.0, v.1)
}

fn metric_cells(r: &ResultRecord) -> String {
    let a = r.aggregate.expect("successful record");
    format!(
        "{} | {} | {} | {} | {}",
        pct(a.bal_acc),
        pct(a.acc),
        pm(a.f1_weighted),
        pm(a.mse),
        pm(a.mae)
    )
}

pub fn front_markdown(front: &ParetoFront, precision: Precision) -> String {
    let mut s = format!(
        "### Pareto front ({precision}, {})\n\n| spec | {} | Bal. Acc. [%] | Acc. [%] | F1 | MSE | MAE |\n|---|---|---|---|---|---|---|\n",
        front.axis.name(),
        front.axis.name()
    );
    for r in &front.members {
        let _ = writeln!(
            s,
            "| `{}` | {} | {} |",
            r.spec,
            r.cost(front.axis),
            metric_cells(r)
        );
    }
    s
}

pub fn selection_markdown(rows: &[Selection]) -> String {
    let mut s = String::from(
        "| Model | Bal. Acc. [%] | Acc. [%] | F1 | MSE | MAE | Size [kB] | MACs | Architecture |\n|---|---|---|---|---|---|---|---|---|\n",
    );
    for row in rows {
        let r = &row.record;
        let _ = writeln!(
            s,
            "| {} | {} | {:.2} | {} | `{}` |",
            row.label,
            metric_cells(r),
            r.cost.size_bytes as f64 / 1000.0,
            r.cost.macs,
            r.spec
        );
    }
    s
}

/// Every record with its cost, accuracy and front membership.
pub fn scatter_csv(records: &[ResultRecord], axis: Axis, digest: &str) -> Result<String> {
    let fronts = fronts_by_precision(records, axis)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "spec",
        "family",
        "precision",
        "cost",
        "bal_acc",
        "bal_acc_std",
        "on_front",
        "config_digest",
    ])?;
    for r in records.iter().filter(|r| r.is_ok()) {
        let on = fronts.contains(&(r.spec.render(), r.precision));
        let a = r.aggregate.expect("successful record");
        w.write_record([
            r.spec.render(),
            r.spec.family.name().to_string(),
            r.precision.name().to_string(),
            r.cost(axis).to_string(),
            a.bal_acc.0.to_string(),
            a.bal_acc.1.to_string(),
            on.to_string(),
            digest.to_string(),
        ])?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?)
        .map_err(|e| Error::Invalid(e.to_string()))
}

fn precisions(records: &[ResultRecord]) -> Vec<Precision> {
    let set: BTreeSet<Precision> = records
        .iter()
        .filter(|r| r.is_ok())
        .map(|r| r.precision)
        .collect();
    set.into_iter().collect()
}

fn fronts_by_precision(
    records: &[ResultRecord],
    axis: Axis,
) -> Result<BTreeSet<(String, Precision)>> {
    let mut out = BTreeSet::new();
    for p in precisions(records) {
        let subset: Vec<ResultRecord> = records
            .iter()
            .filter(|r| r.precision == p)
            .cloned()
            .collect();
        for m in pareto_front(&subset, axis)?.members {
            out.insert((m.spec.render(), p));
        }
    }
    Ok(out)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const FAMILY_COLORS: [(&str, &str); 6] = [
    ("sf", "#1f77b4"),
    ("mc", "#ff7f0e"),
    ("mv", "#2ca02c"),
    ("cat", "#d62728"),
    ("lstm", "#9467bd"),
    ("tcn", "#8c564b"),
];

/// Balanced accuracy against log cost, one panel per precision, fronts as dashed polylines.
pub fn scatter_svg(records: &[ResultRecord], axis: Axis, digest: &str) -> Result<String> {
    let ok: Vec<&ResultRecord> = records.iter().filter(|r| r.is_ok()).collect();
    if ok.is_empty() {
        return Err(Error::Empty("no successful records to plot".into()));
    }
    let panels = precisions(records);
    let (pw, ph, margin) = (420.0, 320.0, 50.0);
    let width = panels.len() as f64 * (pw + margin) + margin;
    let height = ph + 2.0 * margin;
    let lx: Vec<f64> = ok
        .iter()
        .map(|r| (r.cost(axis).max(1) as f64).log10())
        .collect();
    let (xmin, xmax) = lx
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let (xmin, xmax) = (xmin.floor(), xmax.ceil().max(xmin.floor() + 1.0));
    let ys: Vec<f64> = ok.iter().map(|r| r.bal_acc()).collect();
    let ymin = (ys.iter().cloned().fold(f64::INFINITY, f64::min) * 10.0).floor() / 10.0;
    let ymax = ((ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * 10.0).ceil() / 10.0)
        .max(ymin + 0.1);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, "<desc>config_digest={}</desc>", xml_escape(digest));
    for (pi, &prec) in panels.iter().enumerate() {
        let x0 = margin + pi as f64 * (pw + margin);
        let y0 = margin;
        let px = |c: u64| x0 + ((c.max(1) as f64).log10() - xmin) / (xmax - xmin) * pw;
        let py = |a: f64| y0 + ph - (a - ymin) / (ymax - ymin) * ph;
        let _ = writeln!(
            s,
            r##"<g class="panel" data-precision="{prec}"><rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{prec}: balanced accuracy vs {} (log scale)</text>"#,
            x0 + pw / 2.0,
            y0 - 10.0,
            axis.name()
        );
        for e in xmin as i64..=xmax as i64 {
            let x = x0 + (e as f64 - xmin) / (xmax - xmin) * pw;
            let _ = writeln!(
                s,
                r#"<text x="{x:.1}" y="{}" text-anchor="middle">1e{e}</text>"#,
                y0 + ph + 15.0
            );
        }
        let mut a = ymin;
        while a <= ymax + 1e-9 {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{a:.1}</text>"#,
                x0 - 4.0,
                py(a) + 4.0
            );
            a += 0.1;
        }
        for r in ok.iter().filter(|r| r.precision == prec) {
            let fam = r.spec.family.name();
            let color = FAMILY_COLORS
                .iter()
                .find(|(f, _)| *f == fam)
                .map_or("#000", |(_, c)| c);
            let _ = writeln!(
                s,
                r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3" fill="{color}" data-spec="{}"><title>{} {:.4}</title></circle>"#,
                px(r.cost(axis)),
                py(r.bal_acc()),
                xml_escape(&r.spec.render()),
                xml_escape(&r.spec.render()),
                r.bal_acc()
            );
        }
        let subset: Vec<ResultRecord> = records
            .iter()
            .filter(|r| r.precision == prec)
            .cloned()
            .collect();
        let front = pareto_front(&subset, axis)?;
        let pts: Vec<String> = front
            .members
            .iter()
            .map(|r| format!("{:.2},{:.2}", px(r.cost(axis)), py(r.bal_acc())))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="front" points="{}" fill="none" stroke="black" stroke-dasharray="5,3"/></g>"#,
            pts.join(" ")
        );
    }
    for (i, (fam, color)) in FAMILY_COLORS.iter().enumerate() {
        let x = margin + i as f64 * 60.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="8" height="8" fill="{color}"/><text x="{}" y="{}">{fam}</text>"#,
            height - 18.0,
            x + 11.0,
            height - 10.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Full Markdown report: fronts per precision plus the shortlist.
pub fn markdown_report(records: &[ResultRecord], axis: Axis, digest: &str) -> Result<String> {
    if !records.iter().any(|r| r.is_ok()) {
        return Err(Error::Empty("no successful records".into()));
    }
    let mut s = format!(
        "# Exploration report\n\nconfig digest: `{digest}`\n\n{} records, {} successful.\n\n",
        records.len(),
        records.iter().filter(|r| r.is_ok()).count()
    );
    for p in precisions(records) {
        let subset: Vec<ResultRecord> = records
            .iter()
            .filter(|r| r.precision == p)
            .cloned()
            .collect();
        s.push_str(&front_markdown(&pareto_front(&subset, axis)?, p));
        s.push('\n');
    }
    s.push_str("### Selected models\n\n");
    let mut rows = Vec::new();
    for p in precisions(records) {
        rows.extend(select_models(records, p)?);
    }
    s.push_str(&selection_markdown(&rows));
    Ok(s)
}
