//! Query text synthesis. Wording is chosen so that the surface features
//! track the latent spec: every calculator clause carries a tool keyword and
//! digits, every extra reasoning stage adds a multi-step keyword, and the
//! plain clauses avoid both keyword lists entirely.

use rand::seq::IndexedRandom;
use rand::Rng;

use super::synthetic::SyntheticQuerySpec;
use crate::domain::{Query, ToolRegistry};

const TOPICS: &[&str] = &[
    "tides", "glaciers", "rainbows", "volcanoes", "bridges", "vaccines", "forests", "comets",
    "deserts", "coral reefs", "libraries", "markets", "rivers", "windmills", "orchards",
];
const GROUPS: &[&str] = &[
    "farmers", "sailors", "students", "pilots", "doctors", "painters", "miners", "bakers",
    "engineers", "poets", "nurses", "drivers",
];
const PLACES: &[&str] = &[
    "Lisbon", "Oslo", "Nairobi", "Lima", "Hanoi", "Quito", "Dublin", "Cairo", "Perth", "Riga",
    "Tallinn", "Bogota", "Seoul", "Porto",
];
const ITEMS: &[&str] = &[
    "apples", "pencils", "tickets", "bottles", "crates", "chairs", "lamps", "books", "shirts",
    "candles",
];
const BUILDINGS: &[&str] = &["museum", "stadium", "airport", "harbor", "university", "observatory"];

fn pick<'a, R: Rng + ?Sized>(xs: &'a [&'a str], rng: &mut R) -> &'a str {
    xs.choose(rng).copied().unwrap_or("")
}

fn calculator_clause<R: Rng + ?Sized>(rng: &mut R) -> String {
    let a = rng.random_range(2..1000);
    let b = rng.random_range(2..100);
    let c = rng.random_range(2..1000);
    let item = pick(ITEMS, rng);
    match rng.random_range(0..3) {
        0 => format!("Calculate {a} times {b} plus {c}."),
        1 => format!("What is the total price of {a} {item} at {b} dollars each plus a {c} dollar fee?"),
        _ => format!("How many {item} fit in {b} boxes if each box holds {a}?"),
    }
}

fn tool_clause<R: Rng + ?Sized>(tool: usize, rng: &mut R) -> String {
    match tool {
        ToolRegistry::CALCULATOR => calculator_clause(rng),
        ToolRegistry::WEB_SEARCH => format!(
            "Search the web for the year the {} in {} opened.",
            pick(BUILDINGS, rng),
            pick(PLACES, rng)
        ),
        ToolRegistry::PYTHON_EXEC => format!(
            "Run a short program that lists the primes below {}.",
            rng.random_range(50..5000)
        ),
        _ => format!(
            "Look up the code for item {} in the reference table.",
            rng.random_range(100..10_000)
        ),
    }
}

fn plain_clause<R: Rng + ?Sized>(rng: &mut R) -> String {
    let topic = pick(TOPICS, rng);
    let group = pick(GROUPS, rng);
    match rng.random_range(0..4) {
        0 => format!("Explain why {topic} matter to {group}."),
        1 => format!("Describe how {group} think about {topic}."),
        2 => format!("Why do {group} in {} care about {topic}?", pick(PLACES, rng)),
        _ => format!("Give a short account of {topic} for {group}."),
    }
}

const STAGES: &[&str] = &[
    "Then compare the result with the usual case.",
    "Then say which option is better and why.",
    "Then check the answer against the question.",
];
const CLOSERS: &[&str] = &[
    "After that, state what is left over.",
    "After that, give the remaining difference.",
];

/// Renders query text for a latent spec. Deterministic given the rng state.
pub fn render_query<R: Rng + ?Sized>(spec: &SyntheticQuerySpec, rng: &mut R) -> String {
    let mut clauses = Vec::new();
    if spec.required_tools.is_empty() {
        clauses.push(plain_clause(rng));
    } else {
        for tool in spec.required_tools.iter() {
            clauses.push(tool_clause(tool, rng));
        }
    }
    if spec.required_depth >= 2 {
        clauses.insert(0, "Work through this step by step.".to_string());
        clauses.push(pick(STAGES, rng).to_string());
    }
    if spec.required_depth >= 3 {
        clauses.push(pick(CLOSERS, rng).to_string());
    }
    clauses.join(" ")
}

pub fn query_for<R: Rng + ?Sized>(spec: &SyntheticQuerySpec, rng: &mut R) -> Query {
    let id = format!("syn-{:016x}", rng.random::<u64>());
    Query {
        id,
        text: render_query(spec, rng),
        gold_answer: None,
    }
}
