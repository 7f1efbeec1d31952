//! Prompt templates for eliciting verbalized class probabilities.
//!
//! Every template shares one frame: task context, the input, formatting
//! instructions, and an expected-output block holding one score tag per class
//! followed by reason, decision and decision-confidence tags. Variants differ in
//! the score tag wording, extra task instructions, or one extra instruction
//! line inside the expected-output block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    Baseline,
    /// First call of two-stage prompting; the second call uses
    /// [`PromptTemplate::render_confidence`].
    TwoStage,
    /// Two-stage prompting with a reasoning step in the second call.
    TwoStageCot,
    SpecificityLow,
    SpecificityMedium,
    SpecificityHigh,
    SpecificityLinear,
    SpecificityLogistic,
    /// Scores requested on `[0, x]` and divided by `x` when parsed.
    ScoreRange(u32),
    NotStep5,
    TwoDecimals,
    CoarseFine,
    InContext,
    MultiplePredictions,
}

impl TemplateName {
    /// Upper end of the requested score scale.
    pub fn scale(&self) -> f64 {
        match self {
            TemplateName::ScoreRange(x) => *x as f64,
            _ => 1.0,
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TemplateName::Baseline => "baseline",
            TemplateName::TwoStage => "two_stage",
            TemplateName::TwoStageCot => "two_stage_cot",
            TemplateName::SpecificityLow => "specificity_low",
            TemplateName::SpecificityMedium => "specificity_medium",
            TemplateName::SpecificityHigh => "specificity_high",
            TemplateName::SpecificityLinear => "specificity_linear",
            TemplateName::SpecificityLogistic => "specificity_logistic",
            TemplateName::ScoreRange(x) => return write!(f, "score_range({x})"),
            TemplateName::NotStep5 => "not_step5",
            TemplateName::TwoDecimals => "two_decimals",
            TemplateName::CoarseFine => "coarse_fine",
            TemplateName::InContext => "in_context",
            TemplateName::MultiplePredictions => "multiple_predictions",
        };
        f.write_str(s)
    }
}

impl FromStr for TemplateName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(inner) = s.strip_prefix("score_range(").and_then(|r| r.strip_suffix(')')) {
            return match inner.trim().parse::<u32>() {
                Ok(x) if x > 0 => Ok(TemplateName::ScoreRange(x)),
                _ => Err(format!("invalid score range {inner:?}")),
            };
        }
        Ok(match s {
            "baseline" => TemplateName::Baseline,
            "two_stage" => TemplateName::TwoStage,
            "two_stage_cot" => TemplateName::TwoStageCot,
            "specificity_low" => TemplateName::SpecificityLow,
            "specificity_medium" => TemplateName::SpecificityMedium,
            "specificity_high" => TemplateName::SpecificityHigh,
            "specificity_linear" => TemplateName::SpecificityLinear,
            "specificity_logistic" => TemplateName::SpecificityLogistic,
            "not_step5" => TemplateName::NotStep5,
            "two_decimals" => TemplateName::TwoDecimals,
            "coarse_fine" => TemplateName::CoarseFine,
            "in_context" => TemplateName::InContext,
            "multiple_predictions" => TemplateName::MultiplePredictions,
            other => return Err(format!("unknown template {other:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: TemplateName,
    /// Task description placed in the `<task>` block.
    pub context: String,
    /// Class names; the first one is the positive class.
    pub class_labels: Vec<String>,
}

const FORMATTING: &str = "<formatting instructions>
    - Provide your final answer **only** in the specified JSON format below.
    - Do **not** include any explanations or additional text outside the JSON.
    - Ensure the JSON is valid and properly formatted.
    - Do **not** include any extra characters or text before or after the JSON.
</formatting instructions>";

const REASON: &str = "<reason>Explain your reasoning.</reason>";
const DECISION: &str = "<decision>Return the most probable category for the input.</decision>";
const DECISION_CONFIDENCE: &str =
    "<decision-confidence>Provide the probability of your decision being correct in the range of 0 to 1.</decision-confidence>";

const EXTRACT_FEATURES: &str = "1. Your task is to estimate the class probabilities given input. In order to do this, determine the input features that will contribute to your decision and extract their values. You have to ALWAYS assign a continuous numerical value from [0-1] with high precision (can have many decimal points) to each feature you picked, and work with these values in the next steps to represent the features.";
const ASSIGN_WEIGHTS: &str = "3. Assign continuous weights to your hypothesis function considering the desired impact of each input feature to the decision.";

fn task_instructions(name: TemplateName) -> Option<Vec<&'static str>> {
    Some(match name {
        TemplateName::SpecificityLow => vec![
            "1. Your task is to estimate the class probabilities given input. In order to do this, determine the input features that will contribute to your decision.",
            "2. Then, based on your understanding of the task and the input features you selected, pick a function (hypothesis) that takes these input features in, and outputs a continuous decision estimate.",
            "3. Using your input features, hypothesis and its weights, calculate the classification score as your output.",
        ],
        TemplateName::SpecificityMedium => vec![
            EXTRACT_FEATURES,
            "2. Then, based on your understanding of the task and the input features you selected, pick a function (hypothesis) that takes these input features in, and outputs a continuous decision estimate.",
            "3. Using your input features and the hypothesis function and calculate the classification score as your output.",
        ],
        TemplateName::SpecificityHigh => vec![
            EXTRACT_FEATURES,
            "2. Then, based on your understanding of the task and the input features you selected, pick a function (hypothesis) parameterized by weights for each input feature, and that takes these input features in, and outputs a continuous decision estimate.",
            ASSIGN_WEIGHTS,
            "4. Next, having chosen the input features and weights of your prediction fuction, calculate your continuous decision estimates (i.e., probability of classes) as your output by running input features through the function you picked.",
        ],
        TemplateName::SpecificityLinear => vec![
            EXTRACT_FEATURES,
            "2. Then, based on your understanding of the task and the input features you selected, use a linear weighted combination that combines the input features (hypothesis function), and outputs a continuous decision estimate.",
            ASSIGN_WEIGHTS,
            "4. Next, having chosen the input features and weights of your prediction fuction, calculate your continuous decision estimates (i.e., probability of classes) as your output by running input features through the function you picked. If your output is not in [0, 1], you are allowed to round to the closest value inside this range.",
        ],
        TemplateName::SpecificityLogistic => vec![
            EXTRACT_FEATURES,
            "2. Then, based on your understanding of the task and the input features you selected, use a linear weighted combination that combines the input features (hypothesis function) followed by a logistic sigmoid function (1/(1+e^(-x))) to output a continuous decision estimate.",
            ASSIGN_WEIGHTS,
            "4. Next, having chosen the input features and weights of your prediction fuction, calculate your continuous decision estimates (i.e., probability of classes) as your output by running input features through the function you picked.",
        ],
        _ => return None,
    })
}

/// Tags requested before the class scores.
fn leading_tags(name: TemplateName) -> Vec<&'static str> {
    let features = "<selected-features>List the names and values of the features you selected to generate your output with.</selected-features>";
    let weights = "<weights>List the weights you assigned to each input feature to parameterize the logistic regression function.</weights>";
    let calculation = "<calculation>Break down the calculation of your outputs using selected feature values, hypothesis functions and weights.</calculation>";
    match name {
        TemplateName::SpecificityLow => vec![
            features,
            "<hypothesis-function>Describe the function you picked for decision making.</hypothesis-function>",
        ],
        TemplateName::SpecificityMedium => vec![
            features,
            "<hypothesis-function>Describe the function you picked.</hypothesis-function>",
        ],
        TemplateName::SpecificityHigh | TemplateName::SpecificityLinear | TemplateName::SpecificityLogistic => vec![
            features,
            "<hypothesis-function>Describe the function you picked.</hypothesis-function>",
            weights,
            calculation,
        ],
        _ => Vec::new(),
    }
}

/// Extra instruction line after the class scores.
fn variant_instruction(name: TemplateName) -> Option<&'static str> {
    Some(match name {
        TemplateName::NotStep5 => "For the probabilities, do not just default to multiples of 0.05. Over a dataset, the values must have enough spread while being comparable across samples to provide an operating point for any desired precision or recall.",
        TemplateName::TwoDecimals => "Predict the probabilities with two decimal places.",
        TemplateName::CoarseFine => "Obtain the probability values as a coarse-grained and a fine-grained value. The fine-grained value must be within 0.03 of the coarse-grained prediction. Over a dataset, the fine-grained values must have enough spread while being comparable across samples to provide an operating point for any desired precision or recall.",
        TemplateName::InContext => "Over a dataset, the probability values must have enough spread while being comparable across samples to provide an operating point for any desired precision or recall. Here is an example of predicted probabilities for a class over 25 samples in sorted order: [0.01, 0.03, 0.05, 0.08, 0.1, 0.12, 0.19, 0.25, 0.28, 0.32, 0.4, 0.46, 0.53, 0.6, 0.66, 0.71, 0.75, 0.77, 0.81, 0.84, 0.88, 0.9, 0.92, 0.95, 0.96, 0.99].",
        TemplateName::MultiplePredictions => "Current probability value prediction must not be dependent on the previous predicted values.",
        _ => return None,
    })
}

/// One score tag for class `value`.
pub fn class_score_tag(name: TemplateName, value: &str) -> String {
    match name {
        TemplateName::ScoreRange(x) => format!(
            "<{value}-score> Return the likelihood of input belonging to the category '{value}', from 0 to {x}, {x} corresponding to the strongest chance of belonging. </{value}-score>"
        ),
        TemplateName::CoarseFine => format!(
            "<{value}-score-coarse>\n <{value}-score>  Return the probability of input belonging to the category '{value}', from 0 to 1, 1 corresponding to the strongest chance of belonging. </{value}-score>"
        ),
        TemplateName::MultiplePredictions => format!(
            "<{value}-score> Return a list of 20 independent predictions of probability of input belonging to the category '{value}', from 0 to 1, 1 corresponding to the strongest chance of belonging.</{value}-score>"
        ),
        _ => format!(
            "<{value}-score> Return the probability of input belonging to the category '{value}', from 0 to 1, 1 corresponding to the strongest chance of belonging. </{value}-score>"
        ),
    }
}

fn indent(block: &str) -> String {
    block
        .lines()
        .map(|l| format!("    {l}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn header(context: &str, input: &str) -> String {
    format!(
        "<task>\n{}\n</task>\n\n<input_sentence>\n{}\n</input_sentence>\n\n{FORMATTING}\n\n",
        indent(context.trim()),
        indent(input.trim())
    )
}

impl PromptTemplate {
    pub fn new(name: TemplateName, context: impl Into<String>, class_labels: Vec<String>) -> Self {
        Self {
            name,
            context: context.into(),
            class_labels,
        }
    }

    pub fn positive_class(&self) -> Option<&str> {
        self.class_labels.first().map(String::as_str)
    }

    pub fn is_two_stage(&self) -> bool {
        matches!(self.name, TemplateName::TwoStage | TemplateName::TwoStageCot)
    }

    pub fn category_probabilities(&self) -> String {
        self.class_labels
            .iter()
            .map(|v| class_score_tag(self.name, v) + "\n")
            .collect()
    }

    /// Prompt for one instance. For two-stage templates this is the first
    /// call, which asks for the decision only.
    pub fn render(&self, instance_text: &str) -> String {
        let mut out = header(&self.context, instance_text);
        if let Some(steps) = task_instructions(self.name) {
            out.push_str("While generating your output, follow the instructions provided below:\n<task_instructions>\n");
            for step in steps {
                out.push_str(step);
                out.push('\n');
            }
            out.push_str("</task_instructions>\n\n");
        }
        out.push_str("Your output should look like this but in JSON format:\n<expected-output>\n");
        if self.is_two_stage() {
            out.push_str(&format!("    {REASON}\n    {DECISION}\n"));
        } else {
            for tag in leading_tags(self.name) {
                out.push_str(&format!("    {tag}\n"));
            }
            out.push_str(&indent(&self.category_probabilities()));
            out.push('\n');
            if let Some(line) = variant_instruction(self.name) {
                out.push_str(&format!("    {line}\n"));
            }
            out.push_str(&format!("    {REASON}\n    {DECISION}\n    {DECISION_CONFIDENCE}\n"));
        }
        out.push_str("</expected-output>\n");
        out
    }

    /// Second two-stage call: confidence that `decision` is correct.
    pub fn render_confidence(&self, instance_text: &str, decision: &str) -> String {
        let mut out = header(&self.context, instance_text);
        out.push_str(&format!("<proposed-answer>\n    {}\n</proposed-answer>\n\n", decision.trim()));
        out.push_str("Your output should look like this but in JSON format:\n<expected-output>\n");
        if self.name == TemplateName::TwoStageCot {
            out.push_str("    <reasoning>Think step by step about whether the proposed answer is correct for the input before giving your confidence.</reasoning>\n");
        }
        out.push_str("    <confidence>Return the probability of the proposed answer being correct, from 0 to 1.</confidence>\n");
        out.push_str("</expected-output>\n");
        out
    }
}
