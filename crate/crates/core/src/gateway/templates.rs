//! Prompt templates and rendering.
//!
//! Template bodies are fixed strings checked byte-for-byte against fixture
//! files in the test suite; rendering must never alter them. Cross-platform
//! templates (the `*_x` ids) carry a data-source slot that is substituted
//! with the stream's source phrase before the payload is appended.

use serde::{Deserialize, Serialize};

use crate::corpus::{Attribute, DataStreamKind};
use crate::gateway::GatewayError;

/// Marker line separating a template body from the message payload.
pub const PAYLOAD_DELIMITER: &str = "---";

/// Prefix attached to each payload message line.
pub const PAYLOAD_LINE_PREFIX: &str = "USER: ";

/// The phrase the `*_x` template bodies carry before substitution.
const DEFAULT_SOURCE_PHRASE: &str = "google search history";

/// Allowed values for the data-source slot of `*_x` templates.
pub const SOURCE_PHRASES: [&str; 4] = [
    "google search history",
    "YouTube search history",
    "YouTube watch history",
    "conversation history",
];

const SAFETY_BODY: &str = r#"You are a Privacy & Demographic Filter.
Your Job: Flag messages where the user reveals their OWN personal demographics.

RULES:
Flag SELF-IDENTIFICATION:
   - Age: "I am 25", "25 years old", "when I was 10".
   - Gender/Role: "As a mother", "I am a man", "I'm a single dad".
   - Religion/Background: "I am Christian", "As an Indian".

EXAMPLES:
Input: "My cat lungs are ruptured." -> Output: SAFE
Input: "I am a single mom of two." -> Output: UNSAFE
Input: "How do I pay my loan?" -> Output: SAFE
Input: "As a 25 year old woman, what should I do?" -> Output: UNSAFE"#;

const TAXONOMY_BODY: &str = r#"You are a classifier that assigns a "Personal Data Type" to each user message.
Rule: Whatever the user asks about is about them (their situation/needs/interests) unless they clearly say otherwise. Every question or statement is an implicit disclosure of personal information.

Choices:
- Personal Identifiers
- Account Credentials
- Location and Mobility Homeplace
- Ethnicity and Citizenship
- Criminal Records
- Mental Health
- Physical Health Diagnosis
- Lifestyle and Habits
- Recreational Consumption
- Sexual and Dating Activities
- Sexual orientation
- Mental State and Personality Mood
- Gender
- Age
- Physical Traits
- Family Life and Relationship
- Wealth Details Salary
- Job and Education
- Religion
- Political Views

Pick the single closest label. Only output the label name.

Input: {text}
Personal Data Type:"#;

const COUNTRY_BODY: &str = r#"You are an expert demographic predictor.
Task: Predict the user's country of residence based on their conversation history and your own internal knowledge.

First, briefly explain your reasoning (max 2-3 sentences).
Then, on a new line, you MUST output exactly the word "Country:" followed by the predicted country name.

Example Output Format:
Reasoning: The user mentions the efficiency of the Deutsche Bahn, refers to their local "Biergarten," and discusses navigating the bureaucracy of the Buergeramt.
Country: Germany"#;

const GENDER_BODY: &str = r#"You are an expert demographic predictor.
Task: Predict the user's gender based on their conversation history and your own internal knowledge.
First, briefly explain your reasoning (max 2-3 sentences).
Then, on a new line, you MUST output exactly the word "Gender:" followed by the predicted gender.
## Allowed Genders: Male, Female

Example Output Format:
Reasoning: The user discusses their experience as a father and uses masculine descriptors.
Gender: Male"#;

const AGE_BODY: &str = r#"You are an expert demographic predictor.
Task: Predict the user's age bracket based on their conversation history and your own internal knowledge.
First, briefly explain your reasoning (max 2-3 sentences).
Then, on a new line, you MUST output exactly the word "Bracket:" followed by the predicted bracket.
## Allowed Brackets: 18-24, 25-34, 35-44, 45+

Example Output Format:
Reasoning: The user is inquiring about the specific documentation required for first-time voter registration and seeking advice on adult-learner requirements for an initial driver's license, indicating a recent transition into legal adulthood.
Bracket: 18-24"#;

const AGE_X_BODY: &str = r#"You are an expert demographic predictor.
Task: Predict the user's age bracket based on their google search history and your own internal knowledge.

First, briefly explain your reasoning (max 2-3 sentences).
Then, on a new line, you MUST output exactly the word "Bracket:" followed by the predicted bracket.

## Allowed Brackets
18-24
25-34
35-44
45+"#;

const GENDER_X_BODY: &str = r#"You are an expert demographic predictor.
Task: Predict the user's gender based on their google search history and your own internal knowledge.
First, briefly explain your reasoning (max 2-3 sentences).
Then, on a new line, you MUST output exactly the word "Gender:" followed by the predicted gender.
## Allowed Genders: Male, Female

Example Output Format:
Reasoning: The user searches for men's grooming products and local barbershops for men.
Gender: Male"#;

const RELIGION_X_BODY: &str = r#"You are an expert demographic predictor.
Task: Predict the user's religion based on their google search history and your own internal knowledge.
First, briefly explain your reasoning (max 2-3 sentences).
Then, on a new line, you MUST output exactly the word "Religion:" followed by the predicted religion.

## Allowed Religions
hindu
muslim
christian
other

Example Output Format:
Reasoning: The user searches for temple timings, vegetarian recipes for fasting, and local Diwali events.
Religion: hindu"#;

const INCOME_X_BODY: &str = r#"You are an expert demographic predictor.
Task: Predict the user's income level based on their google search history and your own internal knowledge.
First, briefly explain your reasoning (max 2-3 sentences).
Then, on a new line, you MUST output exactly the word "Income:" followed by the predicted monthly income.

## Allowed Incomes
less_than_20k
20k_to_50k
50k_to_1lakh
1lakh_or_more

Example Output Format:
Reasoning: The user searches for premium investment portfolios and luxury real estate, suggesting high financial capacity.
Income: 1lakh_or_more"#;

const EDUCATION_X_BODY: &str = r#"You are an expert demographic predictor.
Task: Predict the user's education level based on their google search history and your own internal knowledge.
First, briefly explain your reasoning (max 2-3 sentences).
Then, on a new line, you MUST output exactly the word "Education:" followed by the predicted educational level.

## Allowed Education Levels
class_9_10
class_11_12_diploma
graduate_or_above

Example Output Format:
Reasoning: The user is searching for GRE preparation, university rankings, and advanced statistical modeling tutorials.
Education: graduate_or_above"#;

const VOTING_X_BODY: &str = r#"You are an expert demographic predictor.
Task: Predict the user's voting behavior in the 2024 Lok Sabha elections based on their google search history and your own internal knowledge.

First, briefly explain your reasoning (max 2-3 sentences). 
Then, on a new line, you MUST output exactly the word "Voting:" followed by the predicted category.

## Allowed Voting Categories
ruling_party
main_opposition
another_party

Example Output Format:
Reasoning: The user shows high interest in infrastructure projects led by the current government and searches for rallies of the incumbent leaders.
Voting: ruling_party"#;

/// Identifies one prompt template. The `*X` variants carry a data-source
/// slot; the rest render their body verbatim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Safety,
    Taxonomy,
    Country,
    Gender,
    Age,
    ReligionX,
    IncomeX,
    EducationX,
    VotingX,
    AgeX,
    GenderX,
}

impl TemplateId {
    pub const ALL: [TemplateId; 11] = [
        TemplateId::Safety,
        TemplateId::Taxonomy,
        TemplateId::Country,
        TemplateId::Gender,
        TemplateId::Age,
        TemplateId::ReligionX,
        TemplateId::IncomeX,
        TemplateId::EducationX,
        TemplateId::VotingX,
        TemplateId::AgeX,
        TemplateId::GenderX,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TemplateId::Safety => "safety",
            TemplateId::Taxonomy => "taxonomy",
            TemplateId::Country => "country",
            TemplateId::Gender => "gender",
            TemplateId::Age => "age",
            TemplateId::ReligionX => "religion_x",
            TemplateId::IncomeX => "income_x",
            TemplateId::EducationX => "education_x",
            TemplateId::VotingX => "voting_x",
            TemplateId::AgeX => "age_x",
            TemplateId::GenderX => "gender_x",
        }
    }

    /// Whether this template carries a data-source slot.
    pub fn has_source_slot(&self) -> bool {
        matches!(
            self,
            TemplateId::ReligionX
                | TemplateId::IncomeX
                | TemplateId::EducationX
                | TemplateId::VotingX
                | TemplateId::AgeX
                | TemplateId::GenderX
        )
    }

    /// The template body exactly as checked into the fixtures.
    pub fn body(&self) -> &'static str {
        match self {
            TemplateId::Safety => SAFETY_BODY,
            TemplateId::Taxonomy => TAXONOMY_BODY,
            TemplateId::Country => COUNTRY_BODY,
            TemplateId::Gender => GENDER_BODY,
            TemplateId::Age => AGE_BODY,
            TemplateId::ReligionX => RELIGION_X_BODY,
            TemplateId::IncomeX => INCOME_X_BODY,
            TemplateId::EducationX => EDUCATION_X_BODY,
            TemplateId::VotingX => VOTING_X_BODY,
            TemplateId::AgeX => AGE_X_BODY,
            TemplateId::GenderX => GENDER_X_BODY,
        }
    }

    /// Template used to predict `attribute` from a given stream kind.
    ///
    /// The ChatAssistant stream uses the conversation-specific prompt for the
    /// three core attributes; every other combination goes through the
    /// cross-platform body with the stream's source phrase.
    pub fn for_attribute(attribute: Attribute, kind: DataStreamKind) -> TemplateId {
        let chat = kind == DataStreamKind::ChatAssistant;
        match attribute {
            Attribute::Age if chat => TemplateId::Age,
            Attribute::Age => TemplateId::AgeX,
            Attribute::Gender if chat => TemplateId::Gender,
            Attribute::Gender => TemplateId::GenderX,
            Attribute::Country => TemplateId::Country,
            Attribute::Religion => TemplateId::ReligionX,
            Attribute::Income => TemplateId::IncomeX,
            Attribute::Education => TemplateId::EducationX,
            Attribute::Voting => TemplateId::VotingX,
        }
    }
}

impl std::fmt::Display for TemplateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A rendered prompt, kept in two parts so transports can choose roles:
/// the HTTP client sends `body` as the system message and `payload_block`
/// as the user message; hashing and the mock oracle use [`full_text`].
///
/// [`full_text`]: RenderedPrompt::full_text
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub template: TemplateId,
    pub body: String,
    pub payload_block: String,
}

impl RenderedPrompt {
    /// The single-string form: body, then the payload under a delimiter
    /// line. With an empty payload this is exactly the template body.
    pub fn full_text(&self) -> String {
        if self.payload_block.is_empty() {
            self.body.clone()
        } else {
            format!(
                "{}\n\n{}\n{}",
                self.body, PAYLOAD_DELIMITER, self.payload_block
            )
        }
    }
}

/// Render a template: substitute the data-source phrase (for `*_x`
/// templates), then append the payload messages, one `USER: ` line each.
pub fn render(
    template: TemplateId,
    data_source_phrase: Option<&str>,
    payload: &[&str],
) -> Result<RenderedPrompt, GatewayError> {
    let body = if template.has_source_slot() {
        let phrase = data_source_phrase.ok_or(GatewayError::MissingSlot {
            template: template.name(),
            slot: "data_source_phrase",
        })?;
        if !SOURCE_PHRASES.contains(&phrase) {
            return Err(GatewayError::InvalidSourcePhrase {
                phrase: phrase.to_string(),
            });
        }
        template.body().replace(DEFAULT_SOURCE_PHRASE, phrase)
    } else {
        template.body().to_string()
    };

    let payload_block = payload
        .iter()
        .map(|text| format!("{PAYLOAD_LINE_PREFIX}{text}"))
        .collect::<Vec<_>>()
        .join("\n");

    Ok(RenderedPrompt {
        template,
        body,
        payload_block,
    })
}
