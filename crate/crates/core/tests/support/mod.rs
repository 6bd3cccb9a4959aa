//! Test oracles and random case generators.
//!
//! Also compiled into the service crate's acceptance harness via `#[path]`, so
//! it only depends on `facade_core`, `rand` and `rand_chacha`.
#![allow(dead_code)]

use facade_core::dataset::{derive_plan, match_detections};
use facade_core::fixtures::synth_facade;
use facade_core::guidance::{
    stub_detect, stub_propose, validate_plan, Modification, ProposeParams,
};
use facade_core::sketch::PixelExtent;
use facade_core::synthesis::MIN_PATCH_SIDE;
use facade_core::{BBox, Detection, DetectionSet, Label, RenovationPlan, SketchImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- matching oracle

#[derive(Debug, Clone, PartialEq)]
pub struct OracleMatch {
    /// Sorted `(before, after)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub total_iou: f64,
}

/// Exhaustive optimal assignment: among all matchings that pair same-label
/// boxes with IoU at least `threshold`, the one with the most pairs, then the
/// largest total IoU.
pub fn optimal_matching(
    before: &DetectionSet,
    after: &DetectionSet,
    threshold: f64,
) -> OracleMatch {
    let edges: Vec<Vec<(usize, f64)>> = before
        .items
        .iter()
        .map(|b| {
            after
                .items
                .iter()
                .enumerate()
                .filter(|(_, a)| a.label == b.label)
                .map(|(j, a)| (j, b.bbox.iou(&a.bbox)))
                .filter(|(_, iou)| *iou >= threshold)
                .collect()
        })
        .collect();

    struct Search<'a> {
        edges: &'a [Vec<(usize, f64)>],
        used: Vec<bool>,
        cur: Vec<(usize, usize)>,
        best: (usize, f64, Vec<(usize, usize)>),
    }
    impl Search<'_> {
        fn go(&mut self, i: usize, total: f64) {
            if i == self.edges.len() {
                let n = self.cur.len();
                if n > self.best.0 || (n == self.best.0 && total > self.best.1 + 1e-12) {
                    self.best = (n, total, self.cur.clone());
                }
                return;
            }
            self.go(i + 1, total);
            for k in 0..self.edges[i].len() {
                let (j, iou) = self.edges[i][k];
                if !self.used[j] {
                    self.used[j] = true;
                    self.cur.push((i, j));
                    self.go(i + 1, total + iou);
                    self.cur.pop();
                    self.used[j] = false;
                }
            }
        }
    }
    let mut s = Search {
        edges: &edges,
        used: vec![false; after.items.len()],
        cur: Vec::new(),
        best: (0, 0.0, Vec::new()),
    };
    s.go(0, 0.0);
    let (_, total_iou, mut pairs) = s.best;
    pairs.sort_unstable();
    OracleMatch { pairs, total_iou }
}

fn total_iou(before: &DetectionSet, after: &DetectionSet, pairs: &[(usize, usize)]) -> f64 {
    pairs
        .iter()
        .map(|&(i, j)| before.items[i].bbox.iou(&after.items[j].bbox))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Agree,
    /// Different pairs, same size and total IoU: both are optimal.
    Tie,
    Unexplained(String),
}

/// Compare `derive_plan` with the plan the optimal assignment implies.
pub fn compare_with_oracle(before: &DetectionSet, after: &DetectionSet, threshold: f64) -> Verdict {
    let oracle = optimal_matching(before, after, threshold);
    let oracle_complete = oracle.pairs.len() == before.items.len();
    let oracle_adds: Vec<usize> = (0..after.items.len())
        .filter(|j| !oracle.pairs.iter().any(|p| p.1 == *j))
        .collect();

    let greedy = match_detections(before, after, threshold);
    let mut gpairs = greedy.pairs.clone();
    gpairs.sort_unstable();
    let derived = derive_plan(before, after, threshold);

    let plan_agrees = match &derived {
        Ok(plan) => {
            let adds: Vec<Modification> = oracle_adds
                .iter()
                .map(|&j| Modification::add(after.items[j].label, after.items[j].bbox))
                .collect();
            oracle_complete && plan.mods == adds
        }
        Err(_) => !oracle_complete,
    };
    if plan_agrees && gpairs == oracle.pairs {
        return Verdict::Agree;
    }
    let gtotal = total_iou(before, after, &gpairs);
    if gpairs.len() == oracle.pairs.len() && (gtotal - oracle.total_iou).abs() <= 1e-9 {
        return Verdict::Tie;
    }
    Verdict::Unexplained(format!(
        "greedy {gpairs:?} (total {gtotal:.6}) vs optimal {:?} (total {:.6})",
        oracle.pairs, oracle.total_iou
    ))
}

// ---------------------------------------------------------------- generators

pub fn random_label(rng: &mut ChaCha8Rng) -> Label {
    if rng.random_bool(0.5) {
        Label::Window
    } else {
        Label::Door
    }
}

/// A box with sides in `[min_side, max_side]` somewhere in the unit square.
pub fn random_box(rng: &mut ChaCha8Rng, min_side: f64, max_side: f64) -> BBox {
    let w = rng.random_range(min_side..=max_side);
    let h = rng.random_range(min_side..=max_side);
    let x0 = rng.random_range(0.0..=1.0 - w);
    let y0 = rng.random_range(0.0..=1.0 - h);
    BBox::new(x0, y0, x0 + w, y0 + h).expect("box inside the unit square")
}

fn disjoint_from(b: &BBox, others: &[BBox]) -> bool {
    others.iter().all(|o| b.intersection_area(o) == 0.0)
}

/// Up to `n` pairwise-disjoint boxes.
pub fn disjoint_boxes(rng: &mut ChaCha8Rng, n: usize, avoid: &[BBox]) -> Vec<BBox> {
    let mut out: Vec<BBox> = Vec::new();
    for _ in 0..n {
        for _ in 0..50 {
            let b = random_box(rng, 0.04, 0.2);
            if disjoint_from(&b, &out) && disjoint_from(&b, avoid) {
                out.push(b);
                break;
            }
        }
    }
    out
}

/// Shift and resize by up to `frac` of the box size, clipped to the unit square.
pub fn jitter(rng: &mut ChaCha8Rng, b: &BBox, frac: f64) -> BBox {
    let (w, h) = (b.width(), b.height());
    let mut d = |s: f64| rng.random_range(-frac..=frac) * s;
    let x0 = (b.x0() + d(w)).clamp(0.0, 1.0);
    let y0 = (b.y0() + d(h)).clamp(0.0, 1.0);
    let x1 = (b.x1() + d(w)).clamp(0.0, 1.0);
    let y1 = (b.y1() + d(h)).clamp(0.0, 1.0);
    BBox::new(x0, y0, x1, y1).unwrap_or(*b)
}

/// A before/after annotation pair like a renovation: disjoint components,
/// the kept ones re-annotated with small jitter, some additions, and now and
/// then a removed or relabelled component. At most `max_side` boxes per side.
pub fn random_pair(rng: &mut ChaCha8Rng, max_side: usize) -> (DetectionSet, DetectionSet) {
    let n_before = rng.random_range(0..=max_side.min(6));
    let before_boxes = disjoint_boxes(rng, n_before, &[]);
    let before: Vec<Detection> = before_boxes
        .iter()
        .map(|b| Detection::new(random_label(rng), *b))
        .collect();
    let mut after: Vec<Detection> = Vec::new();
    for d in &before {
        let roll: f64 = rng.random();
        if roll < 0.04 {
            continue;
        }
        let label = if roll < 0.08 {
            match d.label {
                Label::Window => Label::Door,
                Label::Door => Label::Window,
            }
        } else {
            d.label
        };
        after.push(Detection::new(label, jitter(rng, &d.bbox, 0.08)));
    }
    let room = max_side - after.len();
    let taken: Vec<BBox> = after
        .iter()
        .map(|d| d.bbox)
        .chain(before_boxes.iter().copied())
        .collect();
    let n_add = rng.random_range(0..=room.min(4));
    for b in disjoint_boxes(rng, n_add, &taken) {
        after.push(Detection::new(random_label(rng), b));
    }
    after.shuffle(rng);
    (
        DetectionSet::new("b", before),
        DetectionSet::new("a", after),
    )
}

/// Random detections with quantizable boxes and optional confidences.
pub fn random_detections(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<Detection> {
    (0..rng.random_range(0..=max_len))
        .map(|_| {
            let mut d = Detection::new(random_label(rng), random_box(rng, 0.003, 0.9));
            if rng.random_bool(0.3) {
                d.confidence = Some(rng.random_range(0.0..=1.0));
            }
            d
        })
        .collect()
}

/// A fixture sketch and a valid plan for it: either the stub proposal or
/// random quantized additions kept only while the plan validates.
pub fn random_plan_case(rng: &mut ChaCha8Rng, tolerance: f64) -> (SketchImage, RenovationPlan) {
    let w = rng.random_range(64..=480);
    let h = rng.random_range(64..=360);
    let sketch = synth_facade(rng.random(), w, h).sketch;
    let basis = stub_detect(&sketch, &sketch.meta().source_id);
    if rng.random_bool(0.3) {
        return (
            sketch.clone(),
            stub_propose(
                &sketch,
                &basis,
                "",
                &ProposeParams::with_tolerance(tolerance),
            ),
        );
    }
    let mut plan = RenovationPlan::new(basis, Vec::new(), "");
    for _ in 0..rng.random_range(0..=8) {
        let b = random_box(rng, 0.02, 0.35);
        let Ok(q) = b.quantize() else { continue };
        let (pw, ph) = PixelExtent::of(&q.dequantize(), w, h).dims();
        if pw < MIN_PATCH_SIDE || ph < MIN_PATCH_SIDE {
            continue;
        }
        plan.mods
            .push(Modification::add(random_label(rng), q.dequantize()));
        if !validate_plan(&plan, tolerance).is_valid() {
            plan.mods.pop();
        }
    }
    (sketch, plan)
}
