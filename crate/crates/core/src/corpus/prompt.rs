//! Prompt construction for eliciting state-change descriptions.

use super::StepDescriptionSet;

/// A worked example embedded in the prompt.
#[derive(Debug, Clone)]
pub struct Exemplar {
    pub task: String,
    pub step: String,
    pub verb: String,
    pub description: String,
    pub before: Vec<String>,
    pub after: Vec<String>,
}

impl From<&StepDescriptionSet> for Exemplar {
    fn from(s: &StepDescriptionSet) -> Self {
        Exemplar {
            task: s.task.clone(),
            step: s.step.clone(),
            verb: s.verb.clone(),
            description: s.step_description.clone(),
            before: s.before.clone(),
            after: s.after.clone(),
        }
    }
}

/// The two built-in worked examples (grilling and fried rice) shipped with
/// the prompt template.
pub fn default_exemplars() -> Vec<Exemplar> {
    vec![
        Exemplar {
            task: "Grill steak".into(),
            step: "season steak".into(),
            verb: "season".into(),
            description: "Season steak with salt and pepper".into(),
            before: vec![
                "The steak is unseasoned.".into(),
                "The steak has no salt or pepper on it.".into(),
                "The steak is raw.".into(),
            ],
            after: vec![
                "The steak is with salt and pepper.".into(),
                "The steak has salt and pepper on it.".into(),
                "The steak is ready to be grilled.".into(),
            ],
        },
        Exemplar {
            task: "Make Kimchi Fried Rice".into(),
            step: "add ham".into(),
            verb: "add".into(),
            description: "Incorporate diced ham into the fried rice".into(),
            before: vec![
                "The diced ham is separate from the pan.".into(),
                "The pan contains fried rice.".into(),
                "The pan has no ham on it.".into(),
            ],
            after: vec![
                "The diced ham is blended with the fried rice.".into(),
                "The ham is on the pan.".into(),
                "The pan contains ham.".into(),
            ],
        },
    ]
}

fn push_block(out: &mut String, ex: &Exemplar) {
    out.push_str(&format!("[goal]: {}\n", ex.task));
    out.push_str(&format!("[step]: {}\n", ex.step));
    out.push_str(&format!("[verb]: {}\n", ex.verb));
    out.push_str("Description:\n");
    out.push_str(&ex.description);
    out.push('\n');
    out.push_str("Before:\n");
    for s in &ex.before {
        out.push_str(&format!("- {s}\n"));
    }
    out.push_str("After:\n");
    for s in &ex.after {
        out.push_str(&format!("- {s}\n"));
    }
}

/// Two instructions, the worked examples, then the query block ending at
/// `[step]: <step>`. `k` is the number of state sentences requested per side.
pub fn build_prompt(task: &str, step: &str, exemplars: &[Exemplar], k: usize) -> String {
    let mut out = String::new();
    out.push_str("First, describe the details of [step] for [goal] with one verb. \n");
    out.push_str(&format!(
        "Second, use {k} sentences to describe the status changes of objects before and after [step], avoiding using [verb].\n"
    ));
    for ex in exemplars {
        out.push('\n');
        push_block(&mut out, ex);
    }
    out.push('\n');
    out.push_str(&format!("[goal]: {task}\n"));
    out.push_str(&format!("[step]: {step}"));
    out
}
