use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Reserved marker placed right after the affordance word in answers.
pub const AFF_TOKEN: &str = "⟨Aff⟩";

/// `{o}` is the object, `{a}` the affordance verb. The wording is original.
pub const QUESTION_TEMPLATES: [&str; 15] = [
    "Which part of the {o} would you use to {a} it?",
    "Where should I touch the {o} to {a} it?",
    "Show me the region of the {o} that lets you {a} it.",
    "If I want to {a} this {o}, where do I act?",
    "Point out the area of the {o} meant to {a} with.",
    "What region of this {o} supports the action {a}?",
    "Highlight where a person would {a} the {o}.",
    "Which surface of the {o} is used to {a}?",
    "Help me find where to {a} on the {o}.",
    "On this {o}, which part is for the action {a}?",
    "Mark the part of the {o} involved when you {a}.",
    "How would a robot {a} the {o}? Indicate the part.",
    "Locate the {o} region suitable to {a}.",
    "I need to {a} the {o}. Which area matters?",
    "Segment the portion of the {o} that affords {a}.",
];

pub const ANSWER_TEMPLATES: [&str; 3] = [
    "You can {a} {m} the {o} using the highlighted region.",
    "To {a} {m} the {o}, use this part.",
    "The region shown is where you {a} {m} this {o}.",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub question: String,
    pub answer: String,
    pub category: String,
    pub affordance: String,
    pub template_id: usize,
    pub variant: usize,
}

fn fill(template: &str, object: &str, affordance: &str) -> String {
    template.replace("{o}", object).replace("{a}", affordance).replace("{m}", AFF_TOKEN)
}

pub fn make_instruction(category: &str, affordance: &str, template_id: usize, variant: usize) -> Result<InstructionRecord> {
    if template_id >= QUESTION_TEMPLATES.len() {
        bail!(Argument, "question template {template_id} out of range 0..{}", QUESTION_TEMPLATES.len());
    }
    if variant >= ANSWER_TEMPLATES.len() {
        bail!(Argument, "answer variant {variant} out of range 0..{}", ANSWER_TEMPLATES.len());
    }
    Ok(InstructionRecord {
        question: fill(QUESTION_TEMPLATES[template_id], category, affordance),
        answer: fill(ANSWER_TEMPLATES[variant], category, affordance),
        category: category.into(),
        affordance: affordance.into(),
        template_id,
        variant,
    })
}

/// Every question and answer the generator can emit for the given pairs.
pub fn corpus<'a>(pairs: impl Iterator<Item = (&'a str, &'a str)>) -> Vec<String> {
    let mut out = Vec::new();
    for (c, a) in pairs {
        for t in QUESTION_TEMPLATES {
            out.push(fill(t, c, a));
        }
        for t in ANSWER_TEMPLATES {
            out.push(fill(t, c, a));
        }
    }
    out
}

/// Template text for the dataset manifest.
pub fn template_listing() -> (Vec<String>, Vec<String>) {
    (
        QUESTION_TEMPLATES.iter().map(|&t| t.into()).collect(),
        ANSWER_TEMPLATES.iter().map(|&t| t.into()).collect(),
    )
}
