//! Standalone SVG box plots for the evaluation report: one group per class,
//! one box per method, with the median drawn as a red bar and the mean as a
//! red square.

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

struct BoxStats {
    min: f64,
    q1: f64,
    median: f64,
    q3: f64,
    max: f64,
    mean: f64,
}

fn stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut s: Vec<f64> = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(BoxStats {
        min: s[0],
        q1: quantile(&s, 0.25),
        median: quantile(&s, 0.5),
        q3: quantile(&s, 0.75),
        max: s[s.len() - 1],
        mean: s.iter().sum::<f64>() / s.len() as f64,
    })
}

/// Renders grouped box plots of dice values in [0, 1].
///
/// `groups` holds (group label, per-method value lists); `methods` names each
/// box within a group.
pub fn boxplot_svg(groups: &[(String, Vec<Vec<f64>>)], methods: &[&str]) -> String {
    let box_w = 34.0;
    let gap = 12.0;
    let group_gap = 40.0;
    let margin_left = 62.0;
    let margin_top = 24.0;
    let plot_h = 300.0;
    let label_h = 56.0;
    let group_w = methods.len() as f64 * (box_w + gap) + group_gap;
    let width = margin_left + groups.len() as f64 * group_w + 20.0;
    let height = margin_top + plot_h + label_h;

    let y_of = |v: f64| margin_top + (1.0 - v.clamp(0.0, 1.0)) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         font-family=\"sans-serif\" font-size=\"11\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{width:.0}\" height=\"{height:.0}\" fill=\"white\"/>\n"
    ));
    // y axis and grid
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        let y = y_of(v);
        svg.push_str(&format!(
            "<line x1=\"{margin_left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            width - 10.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>\n",
            margin_left - 6.0,
            y + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">dice</text>\n",
        margin_top + plot_h / 2.0,
        margin_top + plot_h / 2.0
    ));

    for (gi, (label, method_values)) in groups.iter().enumerate() {
        let gx = margin_left + gi as f64 * group_w + group_gap / 2.0;
        for (mi, values) in method_values.iter().enumerate() {
            let Some(st) = stats(values) else { continue };
            let x = gx + mi as f64 * (box_w + gap);
            let cx = x + box_w / 2.0;
            // whiskers
            svg.push_str(&format!(
                "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
                y_of(st.max),
                y_of(st.q3)
            ));
            svg.push_str(&format!(
                "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
                y_of(st.q1),
                y_of(st.min)
            ));
            for v in [st.min, st.max] {
                svg.push_str(&format!(
                    "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
                    cx - box_w / 4.0,
                    y_of(v),
                    cx + box_w / 4.0,
                    y_of(v)
                ));
            }
            // interquartile box
            svg.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{box_w:.1}\" height=\"{:.1}\" \
                 fill=\"#bdd7ee\" stroke=\"black\"/>\n",
                y_of(st.q3),
                (y_of(st.q1) - y_of(st.q3)).max(0.5)
            ));
            // red median bar and red mean square
            svg.push_str(&format!(
                "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" \
                 stroke=\"red\" stroke-width=\"2\"/>\n",
                y_of(st.median),
                x + box_w,
                y_of(st.median)
            ));
            svg.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"6\" height=\"6\" fill=\"red\"/>\n",
                cx - 3.0,
                y_of(st.mean) - 3.0
            ));
            // method label
            svg.push_str(&format!(
                "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
                margin_top + plot_h + 16.0,
                methods.get(mi).unwrap_or(&"?")
            ));
        }
        let center = gx + (method_values.len() as f64 * (box_w + gap) - gap) / 2.0;
        svg.push_str(&format!(
            "<text x=\"{center:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-weight=\"bold\">{label}</text>\n",
            margin_top + plot_h + 36.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
