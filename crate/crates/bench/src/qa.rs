//! Question and caption generation from scene ground truth. Every answer is
//! derived from the `SceneSpec`, so generated labels are exact by
//! construction and the generator can double as an oracle during evaluation.

use mgvt_core::scene::{Color, SceneSpec, Shape};
use mgvt_core::{numerics::Rng, Error, Result};
use serde::{Deserialize, Serialize};

/// The question kinds the synthetic language covers. `Caption` is listed so
/// dataset records can carry captions through the same channel, but
/// evaluation treats it separately from the four constrained-answer kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaKind {
    Existence,
    Count,
    Color,
    Position,
    Caption,
}

impl QaKind {
    /// The four kinds answered by a single constrained token.
    pub const QUESTIONS: [QaKind; 4] = [
        QaKind::Existence,
        QaKind::Count,
        QaKind::Color,
        QaKind::Position,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QaKind::Existence => "existence",
            QaKind::Count => "count",
            QaKind::Color => "color",
            QaKind::Position => "position",
            QaKind::Caption => "caption",
        }
    }

    /// Legal answers for constrained decoding. Empty for captions, which are
    /// generated freely rather than picked from a closed set.
    pub fn answers(self) -> &'static [&'static str] {
        match self {
            QaKind::Existence => &["yes", "no"],
            QaKind::Count => &["zero", "one", "two", "three", "four"],
            QaKind::Color => &["red", "green", "blue", "yellow"],
            QaKind::Position => &["left", "right", "top", "bottom"],
            QaKind::Caption => &[],
        }
    }
}

/// One question (or caption) about one scene. Prompt and answer are plain
/// words from the fixed vocabulary; token ids are resolved at training time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QaItem {
    pub scene: usize,
    pub kind: QaKind,
    pub prompt: String,
    pub answer: String,
}

const COUNT_WORDS: [&str; 5] = ["zero", "one", "two", "three", "four"];

fn count_word(n: usize) -> Result<&'static str> {
    COUNT_WORDS.get(n).copied().ok_or_else(|| {
        Error::Config(format!("cannot express a count of {n} in the vocabulary"))
    })
}

/// All (color, shape) pairs, in a fixed order so sampling is reproducible.
fn all_pairs() -> Vec<(Color, Shape)> {
    let mut v = Vec::with_capacity(Color::ALL.len() * Shape::ALL.len());
    for &c in &Color::ALL {
        for &s in &Shape::ALL {
            v.push((c, s));
        }
    }
    v
}

fn pair_present(spec: &SceneSpec, color: Color, shape: Shape) -> bool {
    spec.objects
        .iter()
        .any(|o| o.color == color && o.shape == shape)
}

/// Existence question: present pair when `want_yes`, absent pair otherwise.
/// With at most four objects and twelve pairs both pools are always
/// nonempty, so the dataset-level yes/no alternation never starves.
///
/// Negatives prefer pairs whose color and shape are both in the scene on
/// different objects (the adversarial regime of presence benchmarks): those
/// cannot be answered from attribute presence alone, only from per-object
/// binding. When the scene offers no such pair, a present color with an
/// absent shape is the next tier, then any absent pair.
pub fn existence_question(
    spec: &SceneSpec,
    scene: usize,
    want_yes: bool,
    rng: &mut Rng,
) -> Result<QaItem> {
    let absent_tier = |c: Color, s: Shape| {
        let color_in = spec.objects.iter().any(|o| o.color == c);
        let shape_in = spec.objects.iter().any(|o| o.shape == s);
        match (color_in, shape_in) {
            (true, true) => 0,
            (true, false) => 1,
            _ => 2,
        }
    };
    let mut pool: Vec<(Color, Shape)> = all_pairs()
        .into_iter()
        .filter(|&(c, s)| pair_present(spec, c, s) == want_yes)
        .collect();
    if pool.is_empty() {
        return Err(Error::Infeasible {
            what: "existence question pair".into(),
            available: 0,
            requested: 1,
        });
    }
    if !want_yes {
        let best = pool.iter().map(|&(c, s)| absent_tier(c, s)).min().unwrap();
        pool.retain(|&(c, s)| absent_tier(c, s) == best);
    }
    let (color, shape) = pool[rng.int_in(0, pool.len() - 1)];
    Ok(QaItem {
        scene,
        kind: QaKind::Existence,
        prompt: format!("is there a {} {}", color.name(), shape.name()),
        answer: if want_yes { "yes" } else { "no" }.to_string(),
    })
}

/// Count question over a random color or shape attribute.
pub fn count_question(spec: &SceneSpec, scene: usize, rng: &mut Rng) -> Result<QaItem> {
    let mut attrs: Vec<(&'static str, usize)> = Vec::new();
    for &c in &Color::ALL {
        let n = spec.objects.iter().filter(|o| o.color == c).count();
        attrs.push((c.name(), n));
    }
    for &s in &Shape::ALL {
        let n = spec.objects.iter().filter(|o| o.shape == s).count();
        attrs.push((s.name(), n));
    }
    let (attr, n) = attrs[rng.int_in(0, attrs.len() - 1)];
    Ok(QaItem {
        scene,
        kind: QaKind::Count,
        prompt: format!("how many {attr} objects"),
        answer: count_word(n)?.to_string(),
    })
}

/// Color question, only asked about a shape that appears exactly once so the
/// answer is unambiguous. Returns None when no shape qualifies.
pub fn color_question(spec: &SceneSpec, scene: usize, rng: &mut Rng) -> Option<QaItem> {
    let unique: Vec<(Shape, Color)> = Shape::ALL
        .iter()
        .filter_map(|&s| {
            let mut hits = spec.objects.iter().filter(|o| o.shape == s);
            match (hits.next(), hits.next()) {
                (Some(o), None) => Some((s, o.color)),
                _ => None,
            }
        })
        .collect();
    if unique.is_empty() {
        return None;
    }
    let (shape, color) = unique[rng.int_in(0, unique.len() - 1)];
    Some(QaItem {
        scene,
        kind: QaKind::Color,
        prompt: format!("what color the {}", shape.name()),
        answer: color.name().to_string(),
    })
}

/// The dominant image-center offset axis for a point, horizontal preferred
/// on ties, used as the position ground truth.
pub fn dominant_axis(cx: f64, cy: f64, side: usize) -> &'static str {
    let half = side as f64 / 2.0;
    let (dx, dy) = (cx - half, cy - half);
    if dx.abs() >= dy.abs() {
        if dx >= 0.0 {
            "right"
        } else {
            "left"
        }
    } else if dy >= 0.0 {
        "bottom"
    } else {
        "top"
    }
}

/// Position question, only asked about a (color, shape) pair that appears
/// exactly once. Returns None when no pair qualifies.
pub fn position_question(spec: &SceneSpec, scene: usize, rng: &mut Rng) -> Option<QaItem> {
    let unique: Vec<(Color, Shape, f64, f64)> = all_pairs()
        .into_iter()
        .filter_map(|(c, s)| {
            let mut hits = spec
                .objects
                .iter()
                .filter(|o| o.color == c && o.shape == s);
            match (hits.next(), hits.next()) {
                (Some(o), None) => Some((c, s, o.cx, o.cy)),
                _ => None,
            }
        })
        .collect();
    if unique.is_empty() {
        return None;
    }
    let (color, shape, cx, cy) = unique[rng.int_in(0, unique.len() - 1)];
    Some(QaItem {
        scene,
        kind: QaKind::Position,
        prompt: format!("where the {} {}", color.name(), shape.name()),
        answer: dominant_axis(cx, cy, spec.side).to_string(),
    })
}

/// Caption: every object as "color shape", reading order (top to bottom,
/// then left to right).
pub fn caption(spec: &SceneSpec, scene: usize) -> QaItem {
    let mut order: Vec<usize> = (0..spec.objects.len()).collect();
    order.sort_by(|&a, &b| {
        let (oa, ob) = (&spec.objects[a], &spec.objects[b]);
        (oa.cy, oa.cx)
            .partial_cmp(&(ob.cy, ob.cx))
            .expect("object centers are finite")
    });
    let words: Vec<String> = order
        .iter()
        .map(|&i| {
            let o = &spec.objects[i];
            format!("{} {}", o.color.name(), o.shape.name())
        })
        .collect();
    QaItem {
        scene,
        kind: QaKind::Caption,
        prompt: "<cap>".to_string(),
        answer: words.join(" "),
    }
}

/// Up to `qa_per_scene` questions for one scene, in the fixed priority
/// existence, count, color, position (the latter two only when the scene
/// supports an unambiguous answer). `want_yes` drives dataset-level yes/no
/// balancing for the existence item.
pub fn scene_questions(
    spec: &SceneSpec,
    scene: usize,
    qa_per_scene: usize,
    want_yes: bool,
    rng: &mut Rng,
) -> Result<Vec<QaItem>> {
    if qa_per_scene == 0 {
        return Err(Error::Config("qa_per_scene must be at least 1".into()));
    }
    let mut items = vec![existence_question(spec, scene, want_yes, rng)?];
    if items.len() < qa_per_scene {
        items.push(count_question(spec, scene, rng)?);
    }
    if items.len() < qa_per_scene {
        if let Some(q) = color_question(spec, scene, rng) {
            items.push(q);
        }
    }
    if items.len() < qa_per_scene {
        if let Some(q) = position_question(spec, scene, rng) {
            items.push(q);
        }
    }
    Ok(items)
}

/// Generator self-check: re-derive each answer from the spec and compare.
/// Used by dataset generation so no mislabeled item is ever written.
pub fn verify_item(spec: &SceneSpec, item: &QaItem) -> Result<()> {
    let words: Vec<&str> = item.prompt.split_whitespace().collect();
    let fail = |why: &str| {
        Err(Error::Corrupt(format!(
            "question {:?} / answer {:?} fails its ground-truth check: {why}",
            item.prompt, item.answer
        )))
    };
    let color_by_name = |name: &str| Color::ALL.iter().copied().find(|c| c.name() == name);
    let shape_by_name = |name: &str| Shape::ALL.iter().copied().find(|s| s.name() == name);
    match item.kind {
        QaKind::Existence => {
            let [_, _, _, c, s] = words[..] else {
                return fail("existence prompt shape");
            };
            let (Some(c), Some(s)) = (color_by_name(c), shape_by_name(s)) else {
                return fail("unknown color or shape");
            };
            let expect = if pair_present(spec, c, s) { "yes" } else { "no" };
            if item.answer != expect {
                return fail(expect);
            }
        }
        QaKind::Count => {
            let [_, _, attr, _] = words[..] else {
                return fail("count prompt shape");
            };
            let n = if let Some(c) = color_by_name(attr) {
                spec.objects.iter().filter(|o| o.color == c).count()
            } else if let Some(s) = shape_by_name(attr) {
                spec.objects.iter().filter(|o| o.shape == s).count()
            } else {
                return fail("unknown attribute");
            };
            if item.answer != count_word(n)? {
                return fail("count mismatch");
            }
        }
        QaKind::Color => {
            let [_, _, _, s] = words[..] else {
                return fail("color prompt shape");
            };
            let Some(s) = shape_by_name(s) else {
                return fail("unknown shape");
            };
            let mut hits = spec.objects.iter().filter(|o| o.shape == s);
            match (hits.next(), hits.next()) {
                (Some(o), None) if o.color.name() == item.answer => {}
                _ => return fail("shape not unique or color mismatch"),
            }
        }
        QaKind::Position => {
            let [_, _, c, s] = words[..] else {
                return fail("position prompt shape");
            };
            let (Some(c), Some(s)) = (color_by_name(c), shape_by_name(s)) else {
                return fail("unknown color or shape");
            };
            let mut hits = spec.objects.iter().filter(|o| o.color == c && o.shape == s);
            match (hits.next(), hits.next()) {
                (Some(o), None) if dominant_axis(o.cx, o.cy, spec.side) == item.answer => {}
                _ => return fail("pair not unique or axis mismatch"),
            }
        }
        QaKind::Caption => {
            if caption(spec, item.scene).answer != item.answer {
                return fail("caption mismatch");
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use mgvt_core::scene::SceneSampler;

    fn sample_spec(seed: u64) -> SceneSpec {
        let mut rng = Rng::from_seed(seed);
        SceneSampler::default()
            .sample(&mut rng)
            .expect("sampler should place objects")
    }

    #[test]
    fn existence_answers_match_ground_truth() {
        let mut rng = Rng::from_seed(11);
        for i in 0..200 {
            let spec = sample_spec(1000 + i);
            let want_yes = i % 2 == 0;
            let q = existence_question(&spec, i as usize, want_yes, &mut rng).unwrap();
            assert_eq!(q.answer == "yes", want_yes);
            verify_item(&spec, &q).unwrap();
        }
    }

    #[test]
    fn every_kind_survives_its_own_verifier() {
        let mut rng = Rng::from_seed(12);
        let mut seen_color = false;
        let mut seen_position = false;
        for i in 0..300 {
            let spec = sample_spec(5000 + i);
            for q in scene_questions(&spec, i as usize, 4, i % 2 == 0, &mut rng).unwrap() {
                verify_item(&spec, &q).unwrap();
                seen_color |= q.kind == QaKind::Color;
                seen_position |= q.kind == QaKind::Position;
            }
            verify_item(&spec, &caption(&spec, i as usize)).unwrap();
        }
        assert!(seen_color, "no scene admitted a color question");
        assert!(seen_position, "no scene admitted a position question");
    }

    #[test]
    fn tampered_answers_are_rejected() {
        let mut rng = Rng::from_seed(13);
        let spec = sample_spec(77);
        let mut q = existence_question(&spec, 0, true, &mut rng).unwrap();
        q.answer = "no".into();
        assert!(verify_item(&spec, &q).is_err());
        let mut c = caption(&spec, 0);
        c.answer.push_str(" red square");
        assert!(verify_item(&spec, &c).is_err());
    }

    #[test]
    fn dominant_axis_prefers_horizontal_on_ties() {
        assert_eq!(dominant_axis(40.0, 40.0, 64), "right");
        assert_eq!(dominant_axis(24.0, 40.0, 64), "left");
        assert_eq!(dominant_axis(32.0, 10.0, 64), "top");
        assert_eq!(dominant_axis(32.0, 50.0, 64), "bottom");
    }

    #[test]
    fn caption_orders_objects_top_to_bottom() {
        for i in 0..50 {
            let spec = sample_spec(9000 + i);
            let cap = caption(&spec, i as usize);
            let words: Vec<&str> = cap.answer.split_whitespace().collect();
            assert_eq!(words.len(), spec.objects.len() * 2);
            let mut last_cy = f64::NEG_INFINITY;
            let mut centers: Vec<(f64, f64)> = spec.objects.iter().map(|o| (o.cy, o.cx)).collect();
            centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (cy, _) in centers {
                assert!(cy >= last_cy);
                last_cy = cy;
            }
        }
    }

    #[test]
    fn all_answers_come_from_the_declared_sets() {
        let mut rng = Rng::from_seed(15);
        for i in 0..100 {
            let spec = sample_spec(300 + i);
            for q in scene_questions(&spec, i as usize, 4, i % 2 == 0, &mut rng).unwrap() {
                assert!(q.kind.answers().contains(&q.answer.as_str()));
            }
        }
    }
}
