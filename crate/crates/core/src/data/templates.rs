use rand::Rng;
use serde::{Deserialize, Serialize};

use super::pools::*;

/// Attribute asked about by a QA pair. The first eight describe authors; the
/// last three are world facts about a country.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrKind {
    Birthplace,
    Birthdate,
    Genre,
    NotableBook,
    Award,
    FatherJob,
    MotherJob,
    Hobby,
    Capital,
    Continent,
    Language,
}

pub const AUTHOR_KINDS: [AttrKind; 8] = [
    AttrKind::Birthplace,
    AttrKind::Birthdate,
    AttrKind::Genre,
    AttrKind::NotableBook,
    AttrKind::Award,
    AttrKind::FatherJob,
    AttrKind::MotherJob,
    AttrKind::Hobby,
];

pub const FACT_KINDS: [AttrKind; 3] = [AttrKind::Capital, AttrKind::Continent, AttrKind::Language];

/// Number of surface forms per question and per answer.
pub const FORMS: usize = 3;

impl AttrKind {
    pub fn name(self) -> &'static str {
        match self {
            AttrKind::Birthplace => "birthplace",
            AttrKind::Birthdate => "birthdate",
            AttrKind::Genre => "genre",
            AttrKind::NotableBook => "notable_book",
            AttrKind::Award => "award",
            AttrKind::FatherJob => "father_job",
            AttrKind::MotherJob => "mother_job",
            AttrKind::Hobby => "hobby",
            AttrKind::Capital => "capital",
            AttrKind::Continent => "continent",
            AttrKind::Language => "language",
        }
    }

    /// Question forms; `{S}` is the subject. Form `i` pairs with answer form `i`.
    pub fn questions(self) -> [&'static str; FORMS] {
        match self {
            AttrKind::Birthplace => [
                "Where was {S} born?",
                "In which city was {S} born?",
                "What is the birthplace of {S}?",
            ],
            AttrKind::Birthdate => [
                "When was {S} born?",
                "What is the birth date of {S}?",
                "On what date was {S} born?",
            ],
            AttrKind::Genre => [
                "What genre does {S} write?",
                "Which genre is {S} known for?",
                "In what genre does {S} work?",
            ],
            AttrKind::NotableBook => [
                "What is the most famous book by {S}?",
                "Which book made {S} famous?",
                "What is the best known book of {S}?",
            ],
            AttrKind::Award => [
                "Which award did {S} win?",
                "What prize was given to {S}?",
                "What honor did {S} receive?",
            ],
            AttrKind::FatherJob => [
                "What did the father of {S} do?",
                "What job did the father of {S} have?",
                "How did the father of {S} earn a living?",
            ],
            AttrKind::MotherJob => [
                "What did the mother of {S} do?",
                "What job did the mother of {S} have?",
                "How did the mother of {S} earn a living?",
            ],
            AttrKind::Hobby => [
                "What hobby does {S} enjoy?",
                "What does {S} do for fun?",
                "Which pastime does {S} love?",
            ],
            AttrKind::Capital => [
                "What is the capital of {S}?",
                "Which city is the capital of {S}?",
                "What city serves as the capital of {S}?",
            ],
            AttrKind::Continent => [
                "On which continent is {S}?",
                "Where in the world is {S}?",
                "Which continent contains {S}?",
            ],
            AttrKind::Language => [
                "What language is spoken in {S}?",
                "Which language do people speak in {S}?",
                "What is the main language of {S}?",
            ],
        }
    }

    /// Answer forms; `{V}` is the attribute value phrase.
    pub fn answers(self) -> [&'static str; FORMS] {
        match self {
            AttrKind::Birthplace => ["Born in {V}.", "The birthplace is {V}.", "{V} is the birthplace."],
            AttrKind::Birthdate => ["Born on {V}.", "The birth date is {V}.", "{V} is the birth date."],
            AttrKind::Genre => ["Writes {V}.", "Known for {V}.", "The genre is {V}."],
            AttrKind::NotableBook => ["Best known for {V}.", "The book is {V}.", "It is {V}."],
            AttrKind::Award => ["Won the {V}.", "The prize was the {V}.", "Received the {V}."],
            AttrKind::FatherJob => ["The father was a {V}.", "He worked as a {V}.", "A {V} by trade."],
            AttrKind::MotherJob => [
                "The mother was a {V}.",
                "She worked as a {V}.",
                "A {V} by profession.",
            ],
            AttrKind::Hobby => ["Enjoys {V}.", "Loves {V} in free time.", "The favorite pastime is {V}."],
            AttrKind::Capital => ["The capital is {V}.", "{V} is the capital.", "It is {V}."],
            AttrKind::Continent => ["It is in {V}.", "Located in {V}.", "The continent is {V}."],
            AttrKind::Language => ["People speak {V}.", "The language is {V}.", "Mostly {V}."],
        }
    }

    /// Draw a value phrase from this kind's pool.
    pub fn sample_value(self, rng: &mut impl Rng) -> String {
        fn pick<'a>(rng: &mut impl Rng, pool: &[&'a str]) -> &'a str {
            pool[rng.random_range(0..pool.len())]
        }
        match self {
            AttrKind::Birthplace => {
                let (city, country) = PLACES[rng.random_range(0..PLACES.len())];
                format!("{city}, {country}")
            }
            AttrKind::Birthdate => {
                let month = pick(rng, MONTHS);
                let day = rng.random_range(1..=N_DAYS);
                let year = FIRST_YEAR + rng.random_range(0..N_YEARS);
                format!("{month} {day}, {year}")
            }
            AttrKind::Genre => format!("{} {}", pick(rng, GENRE_ADJ), pick(rng, GENRE_NOUN)),
            AttrKind::NotableBook => format!("The {} {}", pick(rng, TITLE_ADJ), pick(rng, TITLE_NOUN)),
            AttrKind::Award => format!("{} {} Prize", pick(rng, AWARD_ADJ), pick(rng, AWARD_NOUN)),
            AttrKind::FatherJob | AttrKind::MotherJob => pick(rng, OCCUPATIONS).to_string(),
            AttrKind::Hobby => pick(rng, HOBBIES).to_string(),
            AttrKind::Capital => COUNTRIES[rng.random_range(0..COUNTRIES.len())].1.to_string(),
            AttrKind::Continent => COUNTRIES[rng.random_range(0..COUNTRIES.len())].2.to_string(),
            AttrKind::Language => COUNTRIES[rng.random_range(0..COUNTRIES.len())].3.to_string(),
        }
    }
}

pub fn render_question(kind: AttrKind, form: usize, subject: &str) -> String {
    kind.questions()[form].replace("{S}", subject)
}

pub fn render_answer(kind: AttrKind, form: usize, value: &str) -> String {
    kind.answers()[form].replace("{V}", value)
}
