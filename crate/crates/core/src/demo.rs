//! Self-contained scripted scenarios: a sample plus every fixture record the
//! pipeline needs to run it offline under any routing policy.
//!
//! Candidate scripts are engineered so that candidate 0 always carries the
//! intended stage verdict and the top fused score, while later candidates
//! disagree and trail off. With equal raw rewards inside a stage, the fused
//! gaps are driven entirely by the critique spread, which makes the
//! early-stopping threshold τ worth exploring: small τ stops after two
//! candidates, large τ runs the full budget.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backends::mock::FixtureSet;
use crate::types::{ImageRef, Label, PlanLevel, Sample, Stage};

/// Largest candidate budget the scripted fixtures cover.
pub const MAX_SCRIPTED_CANDIDATES: usize = 8;

/// Critique scores by candidate index: descending from a confident 0.9.
const CRITIQUES: [f64; MAX_SCRIPTED_CANDIDATES] =
    [0.9, 0.7, 0.5, 0.3, 0.1, 0.05, 0.05, 0.05];

/// A scripted sample with its known outcome.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub sample: Sample,
    pub expected: Label,
    pub level: PlanLevel,
}

struct ClassScript {
    text: &'static str,
    web: &'static str,
    image_description: &'static str,
    logic_note: &'static str,
    forgery_score: f64,
    /// Distortion flags for (text, image, cross).
    distorted: [bool; 3],
    reasons: [&'static str; 3],
}

fn class_script(class: Label) -> ClassScript {
    match class {
        Label::Original => ClassScript {
            text: "City officials opened the renovated riverside park to the public over the weekend.",
            web: "Local coverage confirms the riverside park reopened after a two-year renovation.",
            image_description: "A park with new footpaths, benches, and a ribbon-cutting banner near a river.",
            logic_note: "The claim is specific and internally consistent; no contradictions found.",
            forgery_score: 0.12,
            distorted: [false, false, false],
            reasons: [
                "the claim matches the retrieved coverage of the reopening",
                "lighting and geometry are coherent and the forensic score is low",
                "the described park scene matches the caption's event",
            ],
        },
        Label::Tvd => ClassScript {
            text: "The new stadium seats two million spectators, according to the mayor.",
            web: "Reference material lists the stadium capacity as 80,000 seats.",
            image_description: "A large stadium bowl photographed from the upper tier.",
            logic_note: "A two-million-seat venue is implausible by several orders of magnitude.",
            forgery_score: 0.15,
            distorted: [true, false, false],
            reasons: [
                "the claimed capacity contradicts the documented 80,000 seats",
                "the stadium image itself shows no signs of manipulation",
                "caption and image refer to the same venue",
            ],
        },
        Label::Vvd => ClassScript {
            text: "Aerial photographs show the coastline north of the harbor after Saturday's storm.",
            web: "Weather services confirm a storm passed the harbor area on Saturday.",
            image_description: "A coastline with irregular repeating wave textures and warped pier supports.",
            logic_note: "The claim itself is plausible and consistent with the storm reports.",
            forgery_score: 0.88,
            distorted: [false, true, false],
            reasons: [
                "the storm and location are corroborated by the retrieved reports",
                "repeating textures and warped structures indicate synthesis, matching the forensic score",
                "caption and image describe the same coastline",
            ],
        },
        Label::Cmm => ClassScript {
            text: "Thousands attend the annual harvest festival in the town square.",
            web: "The harvest festival is a long-running autumn event in the town square.",
            image_description: "An outdoor ice rink at dusk with skaters and strings of holiday lights.",
            logic_note: "Nothing in the claim is self-contradictory.",
            forgery_score: 0.10,
            distorted: [false, false, true],
            reasons: [
                "the festival claim is consistent with the retrieved background",
                "the rink photograph shows no manipulation artifacts",
                "the image shows a winter ice rink, not a harvest festival crowd",
            ],
        },
    }
}

fn detect_role(stage: Stage) -> &'static str {
    match stage {
        Stage::Text => "text-detect",
        Stage::Image => "image-detect",
        Stage::Cross => "cross-detect",
    }
}

fn critique_role(stage: Stage) -> Option<&'static str> {
    match stage {
        Stage::Text => Some("text-critique"),
        Stage::Image => Some("image-critique"),
        Stage::Cross => None,
    }
}

fn verdict_json(is_distorted: bool, reasoning: &str) -> String {
    serde_json::json!({
        "verdict": if is_distorted { "distorted" } else { "original" },
        "reasoning": reasoning,
    })
    .to_string()
}

fn plan_tag(level: PlanLevel) -> &'static str {
    match level {
        PlanLevel::Level0 => "[BON level-0]",
        PlanLevel::Level1 => "[BON level-1]",
    }
}

fn push_stage_candidates(
    fx: &mut FixtureSet,
    id: &str,
    stage: Stage,
    intended_distorted: bool,
    reason: &str,
    reward: f64,
    critiques: &[f64],
) {
    for index in 0..critiques.len() {
        // Odd candidates disagree with the intended verdict; candidate 0's
        // top critique keeps the intended one selected.
        let is_distorted = if index % 2 == 1 { !intended_distorted } else { intended_distorted };
        let reasoning = format!("{reason} (candidate {index})");
        fx.add_chat(detect_role(stage), id, index, &verdict_json(is_distorted, &reasoning));
        fx.add_reward(id, stage, index, reward);
        if let Some(role) = critique_role(stage) {
            fx.add_chat(role, id, index, &format!("{}", critiques[index]));
        }
    }
}

/// Script one sample and append all of its fixture records. The records
/// cover standard and best-of-N execution of every stage, so the same
/// fixture set serves any routing policy and any τ.
pub fn add_scenario(
    fx: &mut FixtureSet,
    id: &str,
    class: Label,
    level: PlanLevel,
) -> Scenario {
    add_scenario_with_critiques(fx, id, class, level, &CRITIQUES)
}

fn add_scenario_with_critiques(
    fx: &mut FixtureSet,
    id: &str,
    class: Label,
    level: PlanLevel,
    critiques: &[f64],
) -> Scenario {
    let script = class_script(class);
    let text = format!("{} [{id}]", script.text);
    let image_ref = ImageRef::Path(format!("images/{id}.jpg"));
    let sample = Sample::new(id, text.clone(), image_ref.clone(), Some(class))
        .expect("scenario samples are well-formed");

    fx.add_chat("planner", id, 0, plan_tag(level));
    fx.add_web(&text, script.web);
    fx.add_chat("image-analyze", id, 0, script.image_description);
    fx.add_chat("logic-check", id, 0, script.logic_note);
    fx.add_forgery(&image_ref.key(), script.forgery_score);

    let rewards = [2.0, 1.5, 1.0];
    for (i, stage) in Stage::CASCADE.iter().enumerate() {
        push_stage_candidates(
            fx,
            id,
            *stage,
            script.distorted[i],
            script.reasons[i],
            rewards[i],
            critiques,
        );
    }

    Scenario { sample, expected: class, level }
}

/// A balanced scripted suite: `per_class` samples for each of the four
/// classes, planner levels cycling through [Level0, Level1, Level1, ...].
pub fn demo_suite(per_class: usize) -> (Vec<Scenario>, FixtureSet) {
    let mut fx = FixtureSet::new();
    let mut scenarios = Vec::new();
    for class in Label::ALL {
        for i in 0..per_class {
            let level = if i % 3 == 0 { PlanLevel::Level0 } else { PlanLevel::Level1 };
            let id = format!("{}-{}", class.name(), i + 1);
            scenarios.push(add_scenario(&mut fx, &id, class, level));
        }
    }
    (scenarios, fx)
}

/// A suite with randomized critique spreads for threshold-sweep
/// experiments. Candidate 0 keeps the top critique so selections are
/// stable across τ; everything else varies with the seed. Planner levels
/// alternate Level1/Level0.
pub fn tau_sweep_suite(count: usize, seed: u64) -> (Vec<Scenario>, FixtureSet) {
    let mut fx = FixtureSet::new();
    let mut scenarios = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let class = Label::ALL[i % 4];
        let level = if i % 2 == 0 { PlanLevel::Level1 } else { PlanLevel::Level0 };
        let mut critiques = [0.0; MAX_SCRIPTED_CANDIDATES];
        critiques[0] = 0.95;
        let mut rest: Vec<f64> =
            (1..MAX_SCRIPTED_CANDIDATES).map(|_| rng.gen_range(0.0..0.9)).collect();
        rest.sort_by(|a, b| b.total_cmp(a));
        critiques[1..].copy_from_slice(&rest);
        let id = format!("sweep-{}-{}", class.name(), i + 1);
        scenarios.push(add_scenario_with_critiques(&mut fx, &id, class, level, &critiques));
    }
    (scenarios, fx)
}
