//! Per-category labeled-set statistics and the two imbalance weights.
//!
//! For category `i` with `n_i` labeled objects spread over `p_i` labeled
//! images:
//!
//! ```text
//! w1_i = log10(n_i)
//! x_i  = n_i / p_i            (0 when p_i = 0)
//! sum  = Σ x_i
//! w2_i = (sum + C) / (x_i + 1)
//! ```
//!
//! where `C` is the number of declared categories.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{CategoryId, DatasetIndex};

/// How `w1` treats small counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum W1Mode {
    /// `log10(max(n, floor))`; the default floor of 10 keeps `w1 >= 1`.
    Floor { floor: f64 },
    /// `log10(max(n, 1))`: zero and single-object categories get `w1 = 0`.
    Raw,
}

impl Default for W1Mode {
    fn default() -> Self {
        W1Mode::Floor { floor: 10.0 }
    }
}

/// Raw per-category counts over the labeled set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    /// Labeled objects of the category.
    pub objects: u64,
    /// Labeled images containing at least one object of the category.
    pub images: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryWeights {
    pub name: String,
    pub n: u64,
    pub p: u64,
    pub x: f64,
    pub w1: f64,
    pub w2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryWeightTable {
    pub rows: Vec<CategoryWeights>,
    pub sum: f64,
    pub cat_count: usize,
}

/// Counts `n_i` and `p_i` over the labeled images. Ids missing from the
/// index are ignored.
pub fn compute_category_stats<'a>(
    index: &DatasetIndex,
    labeled: impl IntoIterator<Item = &'a str>,
) -> Vec<CategoryCounts> {
    let mut counts = vec![CategoryCounts::default(); index.category_count()];
    let mut seen = BTreeSet::new();
    for id in labeled {
        let Some(record) = index.get(id) else {
            continue;
        };
        seen.clear();
        for obj in &record.objects {
            counts[obj.category.0].objects += 1;
            seen.insert(obj.category.0);
        }
        for &c in &seen {
            counts[c].images += 1;
        }
    }
    counts
}

pub fn weight_w1(n: u64, mode: W1Mode) -> f64 {
    let n = n as f64;
    match mode {
        W1Mode::Floor { floor } => n.max(floor).log10(),
        W1Mode::Raw => n.max(1.0).log10(),
    }
}

/// Mean objects per containing image, 0 for unseen categories.
pub fn mean_objects_per_image(counts: &CategoryCounts) -> f64 {
    if counts.images == 0 {
        0.0
    } else {
        counts.objects as f64 / counts.images as f64
    }
}

/// Returns `(w2 per category, sum)`.
pub fn weight_w2(stats: &[CategoryCounts], cat_count: usize) -> (Vec<f64>, f64) {
    let xs: Vec<f64> = stats.iter().map(mean_objects_per_image).collect();
    let sum: f64 = xs.iter().sum();
    let numerator = sum + cat_count as f64;
    (xs.iter().map(|x| numerator / (x + 1.0)).collect(), sum)
}

impl CategoryWeightTable {
    pub fn from_stats(names: &[String], stats: &[CategoryCounts], mode: W1Mode) -> Self {
        assert_eq!(names.len(), stats.len(), "one name per category");
        let (w2, sum) = weight_w2(stats, names.len());
        let rows = names
            .iter()
            .zip(stats)
            .zip(w2)
            .map(|((name, s), w2)| CategoryWeights {
                name: name.clone(),
                n: s.objects,
                p: s.images,
                x: mean_objects_per_image(s),
                w1: weight_w1(s.objects, mode),
                w2,
            })
            .collect();
        Self {
            rows,
            sum,
            cat_count: names.len(),
        }
    }

    /// Stats and weights for the given labeled images.
    pub fn compute<'a>(
        index: &DatasetIndex,
        labeled: impl IntoIterator<Item = &'a str>,
        mode: W1Mode,
    ) -> Self {
        let stats = compute_category_stats(index, labeled);
        Self::from_stats(index.categories(), &stats, mode)
    }

    pub fn get(&self, category: CategoryId) -> Option<&CategoryWeights> {
        self.rows.get(category.0)
    }

    /// `w1 * w2` for a category.
    pub fn product(&self, category: CategoryId) -> Option<f64> {
        self.get(category).map(|r| r.w1 * r.w2)
    }

    /// CSV `category,n,p,x,w1,w2` followed by a `# sum=..,C=..` row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "category,n,p,x,w1,w2")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{},{}", r.name, r.n, r.p, r.x, r.w1, r.w2)?;
        }
        writeln!(out, "# sum={},C={}", self.sum, self.cat_count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::parse_ground_truth;

    fn counts(objects: u64, images: u64) -> CategoryCounts {
        CategoryCounts { objects, images }
    }

    #[test]
    fn stats_count_objects_and_images() {
        let cats = vec!["car".to_string(), "ship".to_string()];
        let text = r#"{"image_id":"A","width":100,"height":100,"objects":[{"category":"car","cx":1,"cy":1,"w":1,"h":1},{"category":"car","cx":2,"cy":2,"w":1,"h":1},{"category":"car","cx":3,"cy":3,"w":1,"h":1}]}
{"image_id":"B","width":100,"height":100,"objects":[{"category":"car","cx":1,"cy":1,"w":1,"h":1}]}
{"image_id":"E","width":100,"height":100,"objects":[]}
{"image_id":"U","width":100,"height":100,"objects":[{"category":"ship","cx":1,"cy":1,"w":1,"h":1}]}
"#;
        let idx = parse_ground_truth(text.as_bytes(), &cats).unwrap();
        let s = compute_category_stats(&idx, ["A", "B", "E"]);
        assert_eq!(s[0], counts(4, 2));
        assert_eq!(s[1], counts(0, 0));
        let empty = compute_category_stats(&idx, std::iter::empty());
        assert!(empty.iter().all(|c| *c == CategoryCounts::default()));
        let only_empty = compute_category_stats(&idx, ["E"]);
        assert!(only_empty.iter().all(|c| c.images == 0));
    }

    #[test]
    fn w1_examples() {
        let floor = W1Mode::default();
        assert_eq!(weight_w1(1000, floor), 3.0);
        assert_eq!(weight_w1(7, floor), 1.0);
        assert_eq!(weight_w1(0, W1Mode::Floor { floor: 1.0 }), 0.0);
        assert_eq!(weight_w1(0, W1Mode::Raw), 0.0);
        assert_eq!(weight_w1(100, W1Mode::Raw), 2.0);
    }

    #[test]
    fn w2_examples() {
        // x = 2, 3, 5
        let stats = [counts(4, 2), counts(9, 3), counts(10, 2)];
        let (w2, sum) = weight_w2(&stats, 3);
        assert_eq!(sum, 10.0);
        assert_eq!(w2, vec![13.0 / 3.0, 13.0 / 4.0, 13.0 / 6.0]);

        let (w2, sum) = weight_w2(&[counts(4, 2), counts(0, 0)], 2);
        assert_eq!(w2[1], sum + 2.0);

        let (w2, _) = weight_w2(&[counts(5, 5)], 1);
        assert_eq!(w2, vec![1.0]);
    }

    #[test]
    fn csv_export_has_trailer() {
        let names = vec!["a".to_string(), "b".to_string()];
        let t = CategoryWeightTable::from_stats(
            &names,
            &[counts(4, 2), counts(0, 0)],
            W1Mode::default(),
        );
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "category,n,p,x,w1,w2");
        assert_eq!(lines[1], "a,4,2,2,1,1.3333333333333333");
        assert_eq!(lines[2], "b,0,0,0,1,4");
        assert_eq!(lines[3], "# sum=2,C=2");
    }
}
