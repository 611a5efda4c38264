//! Small web-shop simulator: search, paginate, open an item, pick options,
//! buy. The purchase reward counts satisfied attributes, options and the
//! price cap.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{EnvError, EnvObservation, EnvSnapshot, Environment};
use crate::policy::{ActionGrammar, ActionSample, TerminalRule};

pub const PAGE_SIZE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: String,
    pub title: String,
    pub price: f64,
    /// Option group name to the values offered, e.g. `size -> [small, large]`.
    #[serde(default)]
    pub options: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub attributes: BTreeSet<String>,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub query: String,
    #[serde(default)]
    pub attributes: BTreeSet<String>,
    #[serde(default)]
    pub options: BTreeMap<String, String>,
    pub price_cap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShopTask {
    pub instruction: Instruction,
    pub catalog: Arc<Vec<Product>>,
}

impl ShopTask {
    pub(crate) fn validate(&self) -> Result<(), String> {
        if self.catalog.is_empty() {
            return Err("catalog is empty".into());
        }
        if !(self.instruction.price_cap > 0.0) {
            return Err("price_cap must be positive".into());
        }
        Ok(())
    }
}

/// `(matched attributes + matched options + under-cap) / (|attributes| + |options| + 1)`.
pub fn purchase_reward(instr: &Instruction, product: &Product, selected: &BTreeMap<String, String>) -> f64 {
    let attrs = instr
        .attributes
        .iter()
        .filter(|a| product.attributes.iter().any(|p| p.eq_ignore_ascii_case(a)))
        .count();
    let opts = instr
        .options
        .iter()
        .filter(|(name, want)| {
            selected
                .iter()
                .any(|(n, v)| n.eq_ignore_ascii_case(name) && v.eq_ignore_ascii_case(want))
        })
        .count();
    let price = usize::from(product.price < instr.price_cap);
    let total = instr.attributes.len() + instr.options.len() + 1;
    (attrs + opts + price) as f64 / total as f64
}

fn terms(s: &str) -> BTreeSet<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

/// Products sharing at least one term with the query, by overlap then id.
pub fn rank_products<'a>(catalog: &'a [Product], query: &str) -> Vec<&'a Product> {
    let q = terms(query);
    let mut scored: Vec<(usize, &Product)> = catalog
        .iter()
        .map(|p| (terms(&p.title).intersection(&q).count(), p))
        .filter(|(s, _)| *s > 0)
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    scored.into_iter().map(|(_, p)| p).collect()
}

pub fn grammar() -> ActionGrammar {
    ActionGrammar::new(vec![
        ActionGrammar::verb("search", TerminalRule::Never),
        ActionGrammar::verb("click", TerminalRule::Argument("Buy Now".into())),
        ActionGrammar::verb("choose", TerminalRule::Argument("Buy Now".into())),
        ActionGrammar::thought_verb("think"),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Page {
    Search,
    Results { query: String, page: usize },
    Item { product: String, query: String, page: usize },
    Detail { product: String, query: String, page: usize, section: String },
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct State {
    page: Page,
    selected: BTreeMap<String, String>,
}

impl Default for State {
    fn default() -> Self {
        Self {
            page: Page::Search,
            selected: BTreeMap::new(),
        }
    }
}

pub struct ShopEnv {
    task_id: String,
    task: ShopTask,
    state: State,
    grammar: ActionGrammar,
}

enum Button {
    BackToSearch,
    Next,
    Prev,
    BuyNow,
    Section(String),
    Other(String),
}

fn classify(arg: &str) -> Button {
    let a = arg.trim().trim_matches(|c| c == '<' || c == '>').trim().to_lowercase();
    match a.as_str() {
        "back to search" => Button::BackToSearch,
        "next" | "next page" => Button::Next,
        "prev" | "prev page" | "previous" | "previous page" => Button::Prev,
        "buy now" => Button::BuyNow,
        "description" | "features" | "reviews" | "overview" => Button::Section(a),
        _ => Button::Other(arg.trim().to_string()),
    }
}

impl ShopEnv {
    pub fn new(task_id: &str, task: ShopTask) -> Self {
        Self {
            task_id: task_id.to_string(),
            task,
            state: State::default(),
            grammar: grammar(),
        }
    }

    fn product(&self, id: &str) -> &Product {
        self.task
            .catalog
            .iter()
            .find(|p| p.id == id)
            .expect("page ids come from the catalog")
    }

    fn results_page(&self, query: &str, page: usize) -> String {
        let ranked = rank_products(&self.task.catalog, query);
        let mut out = String::from("[Back to Search]\n");
        out.push_str(&format!("Page {page} (Total results: {})\n", ranked.len()));
        if page > 1 {
            out.push_str("[< Prev]\n");
        }
        if page * PAGE_SIZE < ranked.len() {
            out.push_str("[Next >]\n");
        }
        for p in ranked.iter().skip((page - 1) * PAGE_SIZE).take(PAGE_SIZE) {
            out.push_str(&format!("[{}]\n{}\n${:.2}\n", p.id, p.title, p.price));
        }
        out.trim_end().to_string()
    }

    fn item_page(&self, id: &str) -> String {
        let p = self.product(id);
        let mut out = String::from("[Back to Search]\n[< Prev]\n");
        for (name, values) in &p.options {
            let vals: String = values.iter().map(|v| format!("[{v}]")).collect();
            out.push_str(&format!("{name} {vals}\n"));
        }
        out.push_str(&format!(
            "{}\nPrice: ${:.2}\nRating: N.A.\n[Description]\n[Features]\n[Reviews]\n[Buy Now]",
            p.title, p.price
        ));
        out
    }

    fn detail_page(&self, id: &str, section: &str) -> String {
        let p = self.product(id);
        let body = match section {
            "features" => p.attributes.iter().cloned().collect::<Vec<_>>().join(", "),
            "reviews" => "No reviews yet.".to_string(),
            _ if p.description.is_empty() => p.title.clone(),
            _ => p.description.clone(),
        };
        format!("[Back to Search]\n[< Prev]\n{body}")
    }

    fn click(&mut self, arg: &str) -> EnvObservation {
        let page = self.state.page.clone();
        match (page, classify(arg)) {
            (Page::Done, _) => EnvObservation::invalid(),
            (Page::Search, Button::BackToSearch) => EnvObservation::ongoing("[Search]"),
            (_, Button::BackToSearch) => {
                self.state = State::default();
                EnvObservation::ongoing("[Search]")
            }
            (Page::Results { query, page }, Button::Next) => {
                let total = rank_products(&self.task.catalog, &query).len();
                if page * PAGE_SIZE >= total {
                    return EnvObservation::invalid();
                }
                self.state.page = Page::Results {
                    query: query.clone(),
                    page: page + 1,
                };
                EnvObservation::ongoing(self.results_page(&query, page + 1))
            }
            (Page::Results { query, page }, Button::Prev) if page > 1 => {
                self.state.page = Page::Results {
                    query: query.clone(),
                    page: page - 1,
                };
                EnvObservation::ongoing(self.results_page(&query, page - 1))
            }
            (Page::Results { query, page }, Button::Other(target)) => {
                let ranked = rank_products(&self.task.catalog, &query);
                let visible = ranked.iter().skip((page - 1) * PAGE_SIZE).take(PAGE_SIZE);
                let hit = visible
                    .filter(|p| p.id.eq_ignore_ascii_case(&target) || p.title.eq_ignore_ascii_case(&target))
                    .map(|p| p.id.clone())
                    .next();
                match hit {
                    Some(id) => {
                        self.state.selected.clear();
                        let text = self.item_page(&id);
                        self.state.page = Page::Item { product: id, query, page };
                        EnvObservation::ongoing(text)
                    }
                    None => EnvObservation::invalid(),
                }
            }
            (Page::Item { query, page, .. }, Button::Prev) => {
                self.state.page = Page::Results {
                    query: query.clone(),
                    page,
                };
                EnvObservation::ongoing(self.results_page(&query, page))
            }
            (Page::Item { product, query, page }, Button::Section(section)) => {
                let text = self.detail_page(&product, &section);
                self.state.page = Page::Detail {
                    product,
                    query,
                    page,
                    section,
                };
                EnvObservation::ongoing(text)
            }
            (Page::Item { product, .. }, Button::Other(value)) => {
                let p = self.product(&product);
                let group = p.options.iter().find_map(|(name, values)| {
                    values
                        .iter()
                        .find(|v| v.eq_ignore_ascii_case(&value))
                        .map(|v| (name.clone(), v.clone()))
                });
                match group {
                    Some((name, v)) => {
                        self.state.selected.insert(name, v.clone());
                        EnvObservation::ongoing(format!("You have clicked {v}."))
                    }
                    None => EnvObservation::invalid(),
                }
            }
            (Page::Item { product, .. }, Button::BuyNow) => {
                let reward = purchase_reward(&self.task.instruction, self.product(&product), &self.state.selected);
                self.state.page = Page::Done;
                EnvObservation::terminal(format!("Thank you for shopping with us! Your score: {reward:.2}"), reward)
            }
            (Page::Detail { product, query, page, .. }, Button::Prev) => {
                let text = self.item_page(&product);
                self.state.page = Page::Item { product, query, page };
                EnvObservation::ongoing(text)
            }
            _ => EnvObservation::invalid(),
        }
    }
}

impl Environment for ShopEnv {
    fn reset(&mut self) -> EnvObservation {
        self.state = State::default();
        EnvObservation::ongoing(format!("Instruction: {}\n[Search]", self.task.instruction.text))
    }

    fn step(&mut self, action: &ActionSample) -> EnvObservation {
        if action.is_thought() {
            return EnvObservation::ok();
        }
        let arg = action.argument.as_deref().unwrap_or("");
        match action.verb.as_deref() {
            Some("search") if self.state.page == Page::Search => {
                let query = arg.trim().to_string();
                if query.is_empty() {
                    return EnvObservation::invalid();
                }
                let text = self.results_page(&query, 1);
                self.state.page = Page::Results { query, page: 1 };
                EnvObservation::ongoing(text)
            }
            Some("click") | Some("choose") => self.click(arg),
            _ => EnvObservation::invalid(),
        }
    }

    fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot::encode(&self.task_id, &self.state)
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<(), EnvError> {
        self.state = snapshot.decode(&self.task_id)?;
        Ok(())
    }

    fn grammar(&self) -> &ActionGrammar {
        &self.grammar
    }
}
