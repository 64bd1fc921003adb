//! Deterministic fixtures for hermetic testing: canned task suites and a
//! scripted stand-in for a live chat model.
//!
//! Everything here is ordinary library code so integration tests, benches
//! and downstream users can drive full model-backed runs without a network.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::env::{SkillRequirement, TaskInstance, TaskSuite};
use crate::gateway::{ChatRequest, GatewayError, Role, Transport};
use crate::policy::ModuleKind;

fn requirement(subgoal: u32, module: ModuleKind, tag: &str) -> SkillRequirement {
    SkillRequirement {
        subgoal,
        module,
        tags: BTreeSet::from([tag.to_string()]),
    }
}

fn task(
    id: &str,
    instruction: &str,
    num_subgoals: u32,
    gold: &str,
    reqs: Vec<SkillRequirement>,
) -> TaskInstance {
    TaskInstance {
        id: id.to_string(),
        instruction: instruction.to_string(),
        num_subgoals,
        gold_answer: gold.to_string(),
        required_skills: reqs,
    }
}

/// The eight skills of the convergence curriculum, in the stage order a
/// two-subgoal task visits them. Skill `i` belongs to the module acting at
/// stage `i`, so the first failing stage of any prefix task always points
/// at the next unlearned skill.
const CURRICULUM: [(ModuleKind, &str); 8] = [
    (ModuleKind::Planner, "plan-resolve"),
    (ModuleKind::Selector, "select-endpoint"),
    (ModuleKind::Caller, "call-validate"),
    (ModuleKind::Synthesizer, "synth-quote"),
    (ModuleKind::Planner, "plan-sequence"),
    (ModuleKind::Selector, "select-fallback"),
    (ModuleKind::Caller, "call-paginate"),
    (ModuleKind::Synthesizer, "synth-verify"),
];

/// A task requiring the first `depth` curriculum skills at its first
/// `depth` stage slots.
fn curriculum_task(id: &str, instruction: &str, gold: &str, depth: usize) -> TaskInstance {
    assert!((1..=CURRICULUM.len()).contains(&depth));
    let reqs = CURRICULUM[..depth]
        .iter()
        .enumerate()
        .map(|(i, (module, tag))| requirement(i as u32 / 4, *module, tag))
        .collect();
    task(
        id,
        instruction,
        if depth <= 4 { 1 } else { 2 },
        gold,
        reqs,
    )
}

/// Convergence suite: 6 training and 4 selection tasks over one shared
/// eight-skill curriculum the stock seed entirely lacks. Tasks require
/// nested prefixes of the curriculum and every stage check carries exactly
/// one tag, so each accepted mutation closes exactly one gap.
pub fn convergence_suite() -> TaskSuite {
    let train = vec![
        curriculum_task("train-lookup", "Find the release year of the archived report", "1998", 2),
        curriculum_task("train-compare", "Compare the two catalog entries and cite the match", "entry-B", 3),
        curriculum_task("train-route", "Order the maintenance steps for the pump", "drain-first", 4),
        curriculum_task("train-invoke", "Call the conversion service on the ledger row", "604.50", 5),
        curriculum_task("train-chain", "Resolve the station id, then fetch its timetable", "platform-3", 7),
        curriculum_task("train-audit", "Validate the invoice pair and report the discrepancy", "off-by-12", 8),
    ];
    let selection = vec![
        curriculum_task("sel-itinerary", "Plan and book the two-leg itinerary", "seat-14C", 2),
        curriculum_task("sel-inventory", "Reconcile the inventory deltas across both warehouses", "sku-88", 4),
        curriculum_task("sel-migrate", "Migrate the record set and confirm the checksum", "crc-ok", 6),
        curriculum_task("sel-escalate", "Triage the alert and escalate with evidence", "sev-2", 8),
    ];
    TaskSuite { train, selection }
}

const CLUSTER_A: [(ModuleKind, &str); 4] = [
    (ModuleKind::Planner, "census-scope"),
    (ModuleKind::Selector, "census-table"),
    (ModuleKind::Caller, "census-geo"),
    (ModuleKind::Synthesizer, "census-cite"),
];

const CLUSTER_B: [(ModuleKind, &str); 8] = [
    (ModuleKind::Planner, "booking-intent"),
    (ModuleKind::Selector, "booking-search"),
    (ModuleKind::Caller, "booking-hold"),
    (ModuleKind::Synthesizer, "booking-recap"),
    (ModuleKind::Planner, "booking-upgrade"),
    (ModuleKind::Selector, "booking-seatmap"),
    (ModuleKind::Caller, "booking-payment"),
    (ModuleKind::Synthesizer, "booking-receipt"),
];

fn cluster_task(
    id: &str,
    instruction: &str,
    gold: &str,
    skills: &[(ModuleKind, &str)],
    depth: usize,
) -> TaskInstance {
    let reqs = skills[..depth]
        .iter()
        .enumerate()
        .map(|(i, (module, tag))| requirement(i as u32 / 4, *module, tag))
        .collect();
    task(
        id,
        instruction,
        if depth <= 4 { 1 } else { 2 },
        gold,
        reqs,
    )
}

/// Two disjoint task clusters over disjoint specialist skill sets: a
/// shallow data-lookup cluster and a deep booking-workflow cluster.
/// Progress on one cluster never helps the other, so selection pressure
/// decides whether both specializations survive.
pub fn clustered_suite() -> TaskSuite {
    let a = |id: &str, gold: &str, depth: usize| {
        cluster_task(id, "Retrieve and summarize the census figures", gold, &CLUSTER_A, depth)
    };
    let b = |id: &str, gold: &str, depth: usize| {
        cluster_task(id, "Operate the booking workflow end to end", gold, &CLUSTER_B, depth)
    };
    let train = vec![
        a("train-a1", "pop-412", 2),
        a("train-a2", "pop-977", 3),
        a("train-a3", "pop-533", 4),
        b("train-b1", "conf-771", 3),
        b("train-b2", "conf-224", 6),
        b("train-b3", "conf-efg", 8),
    ];
    let selection = vec![
        a("sel-a1", "pop-640", 2),
        a("sel-a2", "pop-118", 4),
        b("sel-b1", "conf-909", 4),
        b("sel-b2", "conf-313", 8),
    ];
    TaskSuite { train, selection }
}

/// Counts every call that reaches the wrapped transport.
pub struct CountingTransport<T: Transport> {
    inner: T,
    calls: AtomicUsize,
}

impl<T: Transport> CountingTransport<T> {
    pub fn new(inner: T) -> CountingTransport<T> {
        CountingTransport {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<T: Transport> Transport for CountingTransport<T> {
    fn send(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.send(request)
    }
}

/// A deterministic stand-in for a live chat model.
///
/// It answers the three prompt families the loop issues: module stages
/// (echo the RULE tags of the system spec, plus a grounded ANSWER line for
/// the synthesizer), the diagnostic judge (score the first failing module
/// from the rendered events), and the targeted editor (append the missing
/// RULE line to the current spec).
#[derive(Debug, Default)]
pub struct ScriptedModelTransport;

impl ScriptedModelTransport {
    fn answer_stage(system: &str, user: &str) -> String {
        let mut response = String::new();
        for tag in crate::env::scripted_tags(system) {
            response.push_str(&format!("RULE: {tag}\n"));
        }
        if user.contains("ANSWER:") {
            // Ground the answer in the latest tool result from the history.
            let result = user
                .lines()
                .rev()
                .find_map(|line| line.split("tool returned ").nth(1))
                .unwrap_or("no tool output available");
            response.push_str(&format!("ANSWER: per the tool output, {result}\n"));
        }
        response
    }

    fn answer_judge(user: &str) -> String {
        let events_section = section_after(user, "# MODULE EVENTS");
        let failing = events_section
            .lines()
            .find(|line| line.contains("verdict Fail"))
            .and_then(|line| line.split("module ").nth(1))
            .and_then(|rest| rest.split_whitespace().next())
            .and_then(ModuleKind::parse)
            .unwrap_or(ModuleKind::Planner);
        let mut response = String::from("1. Scores\n");
        for module in ModuleKind::PIPELINE {
            let score = if module == failing { 0.9 } else { 0.05 };
            response.push_str(&format!("{} {score}\n", module.name()));
        }
        response.push_str("\n2. Evidence\n");
        for line in events_section.lines().filter(|l| !l.trim().is_empty()).take(6) {
            response.push_str(&format!("- {}\n", line.trim()));
        }
        response.push_str(&format!(
            "\n3. One sentence diagnosis\nThe {failing} module produced the earliest failing event.\n"
        ));
        response
    }

    fn answer_editor(user: &str) -> String {
        let target = section_after(user, "# TARGET MODULE")
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .unwrap_or("planner")
            .to_string();
        let current_spec = section_after(user, "# CURRENT SPEC").trim();
        let missing_tag = user
            .split("missing capability ")
            .nth(1)
            .and_then(|rest| rest.split_whitespace().next())
            .map(|tag| tag.trim_end_matches(['.', ',']).to_string())
            .unwrap_or_else(|| "general-care".to_string());
        format!(
            "1. Target module\n{target}\n\n2. Diagnosed error mode\nThe {target} lacks the {missing_tag} capability its stage requires.\n\n3. Minimal edit summary\nDeclare the {missing_tag} capability explicitly.\n\n4. Revised target module spec\n{current_spec}\nRULE: {missing_tag}\n"
        )
    }
}

fn section_after<'a>(text: &'a str, header: &str) -> &'a str {
    let Some(start) = text.find(header) else {
        return "";
    };
    let body = &text[start + header.len()..];
    match body.find("\n# ") {
        Some(end) => &body[..end],
        None => body,
    }
}

impl Transport for ScriptedModelTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let user = request
            .messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let system = request
            .messages
            .iter()
            .find(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        if user.contains("diagnostic judge") {
            Ok(Self::answer_judge(&user))
        } else if user.contains("targeted prompt editor") {
            Ok(Self::answer_editor(&user))
        } else {
            Ok(Self::answer_stage(system, &user))
        }
    }
}
