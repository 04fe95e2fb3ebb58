#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{RngExt, SeedableRng};
use serde_json::{json, Value};

use scir_core::model::{
    diff, CanonPolicy, DataItem, ExtractionResult, ExtractionSchema, Fact, LabelSpec, TaskKind,
};
use scir_core::parser::{parse_completion, serialize_facts, serialize_result};

// ---------------------------------------------------------------------------
// Mock chat-completions server

#[derive(Debug, Clone)]
pub struct Recorded {
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl Recorded {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn prompt(&self) -> String {
        let v: Value = serde_json::from_str(&self.body).expect("request body is JSON");
        v["messages"][0]["content"]
            .as_str()
            .unwrap_or_default()
            .to_string()
    }
}

type Handler = dyn Fn(&Recorded) -> (u16, String) + Send + Sync;

/// A loopback HTTP server answering every request through `handler`.
pub struct MockServer {
    pub base_url: String,
    requests: Arc<Mutex<Vec<Recorded>>>,
}

impl MockServer {
    pub fn start(handler: impl Fn(&Recorded) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        let addr = listener.local_addr().unwrap();
        let requests = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let log = requests.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let handler = handler.clone();
                let log = log.clone();
                thread::spawn(move || serve(stream, &*handler, &log));
            }
        });
        Self {
            base_url: format!("http://{addr}/v1"),
            requests,
        }
    }

    /// Serves chat completions whose content is `reply(prompt)`.
    pub fn chat(reply: impl Fn(&str) -> String + Send + Sync + 'static) -> Self {
        Self::start(move |req| (200, chat_body(&reply(&req.prompt()))))
    }

    pub fn requests(&self) -> Vec<Recorded> {
        self.requests.lock().unwrap().clone()
    }

    pub fn count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

pub fn chat_body(content: &str) -> String {
    json!({
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}],
        "usage": {"prompt_tokens": 10, "completion_tokens": 5}
    })
    .to_string()
}

fn serve(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<Recorded>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).is_err() {
        return;
    }
    let path = request_line
        .split_whitespace()
        .nth(1)
        .unwrap_or("/")
        .to_string();
    let mut headers = Vec::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            break;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            headers.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let len = headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
        .and_then(|(_, v)| v.parse::<usize>().ok())
        .unwrap_or(0);
    let mut body = vec![0u8; len];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let req = Recorded {
        path,
        headers,
        body: String::from_utf8_lossy(&body).into_owned(),
    };
    log.lock().unwrap().push(req.clone());
    let (status, body) = handler(&req);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.flush();
}

// ---------------------------------------------------------------------------
// A simulated model behind the mock server

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.rfind(start)? + start.len();
    let rest = &text[from..];
    Some(rest.find(end).map_or(rest, |i| &rest[..i]))
}

/// Answers extraction, pruning and detection prompts from gold labels.
///
/// First-round extraction returns the item's scripted initial answer; any
/// prompt carrying feedback gets the gold answer. Pruning and detection
/// compare the quoted result against gold.
pub struct SimulatedModel {
    by_text: HashMap<String, DataItem>,
    initial: HashMap<String, String>,
    policy: CanonPolicy,
}

impl SimulatedModel {
    pub fn new(items: &[DataItem], initial: &HashMap<String, String>) -> Self {
        Self {
            by_text: items.iter().map(|i| (i.text.clone(), i.clone())).collect(),
            initial: initial.clone(),
            policy: CanonPolicy::default(),
        }
    }

    pub fn reply(&self, prompt: &str) -> String {
        if prompt.contains("Reply with exactly one word: Correct or Incorrect.") {
            let (item, result) = self.checked(prompt);
            let ok = diff(&result, item.gold.as_ref().unwrap(), &self.policy)
                .unwrap()
                .is_empty();
            return if ok {
                "Correct".into()
            } else {
                "Incorrect".into()
            };
        }
        if prompt.contains("for missing items") || prompt.contains("for redundant items") {
            let (item, result) = self.checked(prompt);
            let d = diff(&result, item.gold.as_ref().unwrap(), &self.policy).unwrap();
            let facts = if prompt.contains("for missing items") {
                d.missing
            } else {
                d.redundant
            };
            return serialize_facts(&facts);
        }
        let text = between(prompt, "Text:\n", "\n\n").expect("extraction prompt has text");
        let item = &self.by_text[text];
        if prompt.contains("Your previous answer") {
            serialize_result(item.gold.as_ref().unwrap())
        } else {
            self.initial[&item.id].clone()
        }
    }

    fn checked(&self, prompt: &str) -> (&DataItem, ExtractionResult) {
        let text = between(prompt, "Text:\n", "\n\nExtraction result:").unwrap();
        let item = &self.by_text[text];
        let raw = between(prompt, "Extraction result:\n", "\n\n").unwrap();
        let result = parse_completion(raw, &item.schema, &self.policy)
            .result()
            .cloned()
            .expect("quoted result parses");
        (item, result)
    }
}

// ---------------------------------------------------------------------------
// Fixtures

pub const PEOPLE: &[&str] = &[
    "Alice", "Bob", "Carol", "Dmitri", "Erin", "Farah", "Goro", "Hana",
];
pub const ORGS: &[&str] = &["Acme", "Globex", "Initech", "Umbrella", "Hooli"];
pub const PLACES: &[&str] = &["Paris", "Lagos", "Osaka", "Lima", "Oslo"];

pub fn policy() -> CanonPolicy {
    CanonPolicy::default()
}

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn ner_schema() -> ExtractionSchema {
    ExtractionSchema::flat(TaskKind::Ner, &["PER", "ORG", "LOC"]).unwrap()
}

pub fn re_schema() -> ExtractionSchema {
    ExtractionSchema::flat(TaskKind::Re, &["works_for", "born_in", "located_in"]).unwrap()
}

pub fn ee_schema() -> ExtractionSchema {
    ExtractionSchema::new(
        TaskKind::Ee,
        vec![
            LabelSpec::event("Hire", ["employer", "employee"]),
            LabelSpec::event("Travel", ["traveler", "destination"]),
        ],
    )
    .unwrap()
}

pub fn schema(task: TaskKind) -> ExtractionSchema {
    match task {
        TaskKind::Ner => ner_schema(),
        TaskKind::Re => re_schema(),
        TaskKind::Ee => ee_schema(),
    }
}

/// A schema-valid random fact for `task`.
pub fn random_fact(task: TaskKind, rng: &mut StdRng) -> Fact {
    let person = *PEOPLE.choose(rng).unwrap();
    let org = *ORGS.choose(rng).unwrap();
    let place = *PLACES.choose(rng).unwrap();
    match task {
        TaskKind::Ner => match rng.random_range(0..3) {
            0 => Fact::entity(person, "per"),
            1 => Fact::entity(org, "org"),
            _ => Fact::entity(place, "loc"),
        },
        TaskKind::Re => match rng.random_range(0..3) {
            0 => Fact::relation(person, "works_for", org),
            1 => Fact::relation(person, "born_in", place),
            _ => Fact::relation(org, "located_in", place),
        },
        TaskKind::Ee => {
            let (ty, trigger, roles) = if rng.random_bool(0.5) {
                (
                    "hire",
                    ["hired", "recruited"][rng.random_range(0..2)],
                    [("employer", org), ("employee", person)],
                )
            } else {
                (
                    "travel",
                    ["flew", "went"][rng.random_range(0..2)],
                    [("traveler", person), ("destination", place)],
                )
            };
            let args = roles
                .iter()
                .filter(|_| rng.random_bool(0.75))
                .map(|(r, s)| (*r, *s))
                .collect::<Vec<_>>();
            Fact::event(trigger, ty, args)
        }
    }
}

pub fn random_result(task: TaskKind, max: usize, rng: &mut StdRng) -> ExtractionResult {
    let n = rng.random_range(0..=max);
    let facts: Vec<Fact> = (0..n).map(|_| random_fact(task, rng)).collect();
    ExtractionResult::new(task, facts, &policy()).unwrap()
}

/// `n` items of one task, each with a non-empty gold label and unique text.
pub fn items(task: TaskKind, n: usize, seed: u64) -> Vec<DataItem> {
    let mut rng = rng(seed);
    (0..n)
        .map(|i| {
            let mut gold = random_result(task, 4, &mut rng);
            while gold.is_empty() {
                gold = random_result(task, 4, &mut rng);
            }
            let text = format!(
                "Report {i} ({task}): {}.",
                gold.facts
                    .iter()
                    .map(|f| f.spans().collect::<Vec<_>>().join(" "))
                    .collect::<Vec<_>>()
                    .join("; ")
            );
            DataItem::new(format!("{task}-{i:03}"), schema(task), text).with_gold(gold)
        })
        .collect()
}

/// Gold minus some facts plus some schema-valid spurious ones.
pub fn corrupt(
    gold: &ExtractionResult,
    drop: usize,
    add: usize,
    rng: &mut StdRng,
) -> ExtractionResult {
    let mut facts: Vec<Fact> = gold.facts.iter().cloned().collect();
    for _ in 0..drop.min(facts.len()) {
        let at = rng.random_range(0..facts.len());
        facts.remove(at);
    }
    let mut set: BTreeSet<Fact> = facts.into_iter().collect();
    let mut added = 0;
    let mut guard = 0;
    while added < add && guard < 1000 {
        guard += 1;
        let f = scir_core::model::canonicalize(&random_fact(gold.task, rng), &policy());
        if !gold.facts.contains(&f) && set.insert(f) {
            added += 1;
        }
    }
    ExtractionResult {
        task: gold.task,
        facts: set,
    }
}

/// Initial answers where every `wrong_every`-th item is corrupted.
pub fn initial_answers(
    items: &[DataItem],
    wrong_every: usize,
    seed: u64,
) -> (HashMap<String, String>, BTreeSet<String>) {
    let mut rng = rng(seed);
    let mut out = HashMap::new();
    let mut wrong = BTreeSet::new();
    for (i, item) in items.iter().enumerate() {
        let gold = item.gold.as_ref().unwrap();
        let answer = if i % wrong_every == 0 {
            let c = corrupt(gold, 1, 1, &mut rng);
            if c != *gold {
                wrong.insert(item.id.clone());
            }
            c
        } else {
            gold.clone()
        };
        out.insert(item.id.clone(), serialize_result(&answer));
    }
    (out, wrong)
}

pub fn golds(items: &[DataItem]) -> scir_core::eval::Golds {
    items
        .iter()
        .map(|i| (i.id.clone(), i.gold.clone().unwrap()))
        .collect()
}
