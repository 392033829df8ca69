//! Seeded synthetic corpus generator.
//!
//! Emits per-domain/per-split JSON files in the same public schema the loader
//! reads, with the published structural properties of the two-domain corpus:
//! exact training-split sizes (1116 dialogues / 11234 turns and 384 / 3562),
//! twelve slot types of which `date` and `time` are shared across domains,
//! twenty-one user dialogue act types of which twelve are shared, three
//! intents, and roughly 13% of evaluation movie names also present in
//! training.
//!
//! The dialogues are built so context genuinely matters:
//! * bare-value answers ("two", "golden dragon") carry a slot that is only
//!   recoverable from the preceding system act (`request(num_people)` vs
//!   `request(num_tickets)`), because the same surface appears under several
//!   slots across the combined corpus;
//! * the intent is stated in the first user turn and most later turns are
//!   wording-compatible with every intent, so turn-level models must carry
//!   dialogue state to classify them.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{count_split, CorpusError, Dialogue, DialogueAct, SlotSpan, SplitCounts, Turn};

pub const DOMAINS: [&str; 2] = ["sim-r", "sim-m"];

// ─── Static value pools ──────────────────────────────────────────────────────

const ADJ: [&str; 10] =
    ["golden", "olive", "blue", "royal", "grand", "little", "spicy", "green", "silver", "red"];
const NOUN: [&str; 10] =
    ["garden", "dragon", "table", "lotus", "fork", "palace", "kitchen", "spoon", "orchid", "harbor"];
const EVAL_ADJ: [&str; 8] =
    ["crimson", "velvet", "shadow", "broken", "winter", "lunar", "scarlet", "ivory"];
const EVAL_NOUN: [&str; 6] = ["empire", "voyage", "crossing", "mirage", "lantern", "citadel"];

const CATEGORY: [&str; 8] =
    ["italian", "chinese", "mexican", "indian", "thai", "sushi", "vegan", "greek"];
const LOCATION: [&str; 6] = ["downtown", "midtown", "uptown", "riverside", "city center", "old town"];
const MEAL: [&str; 4] = ["breakfast", "lunch", "dinner", "brunch"];
const NUMBER: [&str; 6] = ["two", "three", "four", "five", "six", "seven"];
const PRICE: [&str; 4] = ["cheap", "moderate", "expensive", "upscale"];
const RATING: [&str; 4] = ["good", "great", "top rated", "five star"];
const DATE: [&str; 10] = [
    "today",
    "tomorrow",
    "monday",
    "tuesday",
    "wednesday",
    "thursday",
    "friday",
    "saturday",
    "sunday",
    "next friday",
];
const TIME: [&str; 8] = ["noon", "5 pm", "6 pm", "7 pm", "8 pm", "9 pm", "10 pm", "11 am"];
const THEATRE: [&str; 6] = [
    "angelika cinema",
    "majestic theatre",
    "regal multiplex",
    "paradise cinema",
    "grand hall",
    "starlight screens",
];

const RESERVE: &str = "reserve_restaurant";
const FIND: &str = "find_restaurant";
const BUY: &str = "buy_movie_tickets";

/// Name pools for one split: training names, or evaluation names with a
/// controlled fraction reused from training.
struct World {
    restaurants: Vec<String>,
    movies: Vec<String>,
}

/// Builds the train and eval worlds plus the fraction of eval movie names
/// that also occur in training (targeting the published ≈13%).
fn build_worlds(seed: u64) -> (World, World, f64) {
    let mut combos: Vec<String> = ADJ
        .iter()
        .flat_map(|a| NOUN.iter().map(move |n| format!("{a} {n}")))
        .collect();
    combos.shuffle(&mut ChaCha20Rng::seed_from_u64(seed ^ 0x6e616d65));
    // Overlapping windows: twenty names serve as both restaurant and movie,
    // so a bare two-token name is ambiguous without system context.
    let restaurants_train: Vec<String> = combos[0..40].to_vec();
    let movies_train: Vec<String> = combos[20..60].to_vec();

    let mut fresh: Vec<String> = EVAL_ADJ
        .iter()
        .flat_map(|a| EVAL_NOUN.iter().map(move |n| format!("{a} {n}")))
        .collect();
    fresh.shuffle(&mut ChaCha20Rng::seed_from_u64(seed ^ 0x6576616c));
    let mut movies_eval: Vec<String> = movies_train[0..6].to_vec();
    movies_eval.extend(fresh[0..40].iter().cloned());
    let mut restaurants_eval: Vec<String> = restaurants_train[0..38].to_vec();
    restaurants_eval.extend(fresh[40..46].iter().cloned());

    let train_names: BTreeSet<&String> = movies_train.iter().collect();
    let eval_names: BTreeSet<&String> = movies_eval.iter().collect();
    let reused = eval_names.iter().filter(|n| train_names.contains(**n)).count();
    let overlap = reused as f64 / eval_names.len() as f64;

    (
        World { restaurants: restaurants_train, movies: movies_train },
        World { restaurants: restaurants_eval, movies: movies_eval },
        overlap,
    )
}

// ─── Utterance assembly ──────────────────────────────────────────────────────

#[derive(Default)]
struct Utt {
    tokens: Vec<String>,
    spans: Vec<SlotSpan>,
}

impl Utt {
    fn say(&mut self, phrase: &str) -> &mut Self {
        self.tokens.extend(phrase.split_whitespace().map(str::to_string));
        self
    }

    fn slot(&mut self, slot: &str, value: &str) -> &mut Self {
        let start = self.tokens.len();
        self.say(value);
        self.spans.push(SlotSpan {
            slot: slot.to_string(),
            start,
            exclusive_end: self.tokens.len(),
        });
        self
    }
}

fn pick<'a>(rng: &mut ChaCha20Rng, options: &[&'a str]) -> &'a str {
    options.choose(rng).copied().expect("non-empty option list")
}

fn pick_owned(rng: &mut ChaCha20Rng, options: &[String]) -> String {
    options.choose(rng).cloned().expect("non-empty option list")
}

fn act(t: &str) -> DialogueAct {
    DialogueAct { act_type: t.to_string(), slot: None, value: None }
}

fn act_slot(t: &str, slot: &str) -> DialogueAct {
    DialogueAct { act_type: t.to_string(), slot: Some(slot.to_string()), value: None }
}

fn act_value(t: &str, slot: &str, value: &str) -> DialogueAct {
    DialogueAct {
        act_type: t.to_string(),
        slot: Some(slot.to_string()),
        value: Some(value.to_string()),
    }
}

fn turn(
    system_acts: Vec<DialogueAct>,
    system: &str,
    intent: &str,
    user_acts: &[&str],
    utt: Utt,
) -> Turn {
    Turn {
        system_acts,
        system_tokens: system.split_whitespace().map(str::to_string).collect(),
        user_tokens: utt.tokens,
        intent: intent.to_string(),
        user_acts: user_acts.iter().map(|s| s.to_string()).collect(),
        slot_spans: utt.spans,
    }
}

// ─── Slot-value sampling ─────────────────────────────────────────────────────

fn value_for(slot: &str, world: &World, rng: &mut ChaCha20Rng) -> String {
    match slot {
        "category" => pick(rng, &CATEGORY).to_string(),
        "location" => pick(rng, &LOCATION).to_string(),
        "meal" => pick(rng, &MEAL).to_string(),
        "num_people" | "num_tickets" => pick(rng, &NUMBER).to_string(),
        "price_range" => pick(rng, &PRICE).to_string(),
        "rating" => pick(rng, &RATING).to_string(),
        "date" => pick(rng, &DATE).to_string(),
        "time" => pick(rng, &TIME).to_string(),
        "restaurant_name" => pick_owned(rng, &world.restaurants),
        "movie" => pick_owned(rng, &world.movies),
        "theatre_name" => pick(rng, &THEATRE).to_string(),
        other => unreachable!("no value pool for slot {other}"),
    }
}

/// How the system asks for a slot; the wording names the slot, which is what
/// lets utterance-level context variants resolve bare answers.
fn request_phrase(slot: &str) -> &'static str {
    match slot {
        "category" => "what kind of food would you like",
        "location" => "which area should i search",
        "meal" => "which meal is this for",
        "num_people" => "how many people will be going",
        "num_tickets" => "how many tickets do you need",
        "price_range" => "what price range works for you",
        "rating" => "how well rated should it be",
        "date" => "what day would you like",
        "time" => "what time works for you",
        "restaurant_name" => "which restaurant do you have in mind",
        "movie" => "which movie would you like to see",
        "theatre_name" => "which theatre do you prefer",
        other => unreachable!("no request phrase for slot {other}"),
    }
}

/// An anchored, self-contained answer for a slot (no context needed to tag).
fn anchored_answer(intent: &str, slot: &str, value: &str, rng: &mut ChaCha20Rng) -> Utt {
    let mut u = Utt::default();
    let lead = match intent {
        RESERVE => pick(rng, &["book the table", "reserve it", "make the reservation"]),
        FIND => pick(rng, &["find me something", "i am looking for a place", "search for spots"]),
        BUY => pick(rng, &["book the tickets", "get me seats", "buy them"]),
        other => unreachable!("unknown intent {other}"),
    };
    u.say(lead);
    match slot {
        "time" => u.say("at").slot("time", value),
        "date" => u.say("on").slot("date", value),
        "num_people" => u.say("for").slot("num_people", value).say("people"),
        "num_tickets" => u.say("for").slot("num_tickets", value).say("tickets"),
        "category" => u.say("serving").slot("category", value).say("food"),
        "location" => u.say("in").slot("location", value),
        "meal" => u.say("for").slot("meal", value),
        "price_range" => u.say("somewhere").slot("price_range", value),
        "rating" => u.say("rated").slot("rating", value),
        "restaurant_name" => u.say("at").slot("restaurant_name", value),
        "movie" => u.say("for").slot("movie", value),
        "theatre_name" => u.say("at").slot("theatre_name", value),
        other => unreachable!("no anchored answer for slot {other}"),
    };
    u
}

// ─── Turn classes ────────────────────────────────────────────────────────────

struct DomainSpec {
    name: &'static str,
    /// Slots the system may ask for with a full-sentence answer.
    requestable: &'static [&'static str],
    /// Slots answered with a bare value, with sampling weights.
    bare: &'static [(&'static str, f64)],
}

const SIM_R: DomainSpec = DomainSpec {
    name: "sim-r",
    requestable: &[
        "category",
        "location",
        "meal",
        "num_people",
        "price_range",
        "rating",
        "restaurant_name",
        "date",
        "time",
    ],
    bare: &[("num_people", 0.25), ("restaurant_name", 0.25), ("time", 0.25), ("date", 0.25)],
};

const SIM_M: DomainSpec = DomainSpec {
    name: "sim-m",
    requestable: &["movie", "theatre_name", "num_tickets", "date", "time"],
    bare: &[("num_tickets", 0.45), ("movie", 0.45), ("time", 0.05), ("date", 0.05)],
};

fn weighted<'a>(rng: &mut ChaCha20Rng, options: &[(&'a str, f64)]) -> &'a str {
    let total: f64 = options.iter().map(|(_, w)| w).sum();
    let mut roll = rng.gen_range(0.0..total);
    for (name, w) in options {
        if roll < *w {
            return name;
        }
        roll -= w;
    }
    options.last().expect("non-empty weighted list").0
}

fn opening(spec: &DomainSpec, intent: &str, world: &World, rng: &mut ChaCha20Rng) -> Turn {
    let mut u = Utt::default();
    let mut acts: Vec<&str> = Vec::new();
    if rng.gen_bool(0.3) {
        u.say(pick(rng, &["hi", "hello"]));
        acts.push("greeting");
    }
    acts.push("inform");
    match intent {
        RESERVE => {
            let name = value_for("restaurant_name", world, rng);
            match rng.gen_range(0..3) {
                0 => {
                    let num = value_for("num_people", world, rng);
                    let date = value_for("date", world, rng);
                    u.say("i need a table at")
                        .slot("restaurant_name", &name)
                        .say("for")
                        .slot("num_people", &num)
                        .say("on")
                        .slot("date", &date);
                }
                1 => {
                    let num = value_for("num_people", world, rng);
                    u.say("reserve a table for")
                        .slot("num_people", &num)
                        .say("at")
                        .slot("restaurant_name", &name);
                }
                _ => {
                    let time = value_for("time", world, rng);
                    u.say("book me a table at")
                        .slot("restaurant_name", &name)
                        .say("at")
                        .slot("time", &time);
                }
            }
        }
        FIND => {
            match rng.gen_range(0..4) {
                0 => {
                    let cat = value_for("category", world, rng);
                    let loc = value_for("location", world, rng);
                    u.say("find me a")
                        .slot("category", &cat)
                        .say("restaurant in")
                        .slot("location", &loc);
                }
                1 => {
                    let price = value_for("price_range", world, rng);
                    let cat = value_for("category", world, rng);
                    u.say("i am looking for a")
                        .slot("price_range", &price)
                        .slot("category", &cat)
                        .say("place");
                }
                2 => {
                    let rating = value_for("rating", world, rng);
                    let loc = value_for("location", world, rng);
                    u.say("show me")
                        .slot("rating", &rating)
                        .say("restaurants in")
                        .slot("location", &loc);
                }
                _ => {
                    let meal = value_for("meal", world, rng);
                    let loc = value_for("location", world, rng);
                    u.say("find a spot for")
                        .slot("meal", &meal)
                        .say("in")
                        .slot("location", &loc);
                }
            }
        }
        BUY => {
            let movie = value_for("movie", world, rng);
            match rng.gen_range(0..3) {
                0 => {
                    let num = value_for("num_tickets", world, rng);
                    u.say("i want")
                        .slot("num_tickets", &num)
                        .say("tickets for")
                        .slot("movie", &movie);
                }
                1 => {
                    let theatre = value_for("theatre_name", world, rng);
                    u.say("buy tickets for")
                        .slot("movie", &movie)
                        .say("at")
                        .slot("theatre_name", &theatre);
                }
                _ => {
                    let num = value_for("num_tickets", world, rng);
                    let date = value_for("date", world, rng);
                    u.say("get me")
                        .slot("num_tickets", &num)
                        .say("seats for")
                        .slot("movie", &movie)
                        .say("on")
                        .slot("date", &date);
                }
            }
        }
        other => unreachable!("unknown intent {other}"),
    }
    let sys = if spec.name == "sim-r" {
        "hello how can i help with restaurants today"
    } else {
        "hello how can i help with movies today"
    };
    turn(vec![act("greeting")], sys, intent, &acts, u)
}

fn middle(spec: &DomainSpec, intent: &str, world: &World, rng: &mut ChaCha20Rng) -> Turn {
    let verb = match intent {
        RESERVE => "book it",
        FIND => "list places",
        BUY => "buy them",
        other => unreachable!("unknown intent {other}"),
    };
    let roll: f64 = rng.gen();
    if roll < 0.40 {
        // Full-sentence answer to a slot request; wording reveals the intent.
        let slot = pick(rng, spec.requestable);
        let value = value_for(slot, world, rng);
        let u = anchored_answer(intent, slot, &value, rng);
        let mut acts = vec!["inform"];
        if spec.name == "sim-r" && matches!(slot, "price_range" | "rating") {
            acts.push("inform_preference");
        }
        turn(vec![act_slot("request", slot)], request_phrase(slot), intent, &acts, u)
    } else if roll < 0.55 {
        // Bare value: the slot is only recoverable from the system act.
        let slot = weighted(rng, spec.bare);
        let value = value_for(slot, world, rng);
        let mut u = Utt::default();
        u.slot(slot, &value);
        let mut acts = vec!["inform"];
        match slot {
            "num_people" => acts.push("inform_party_size"),
            "num_tickets" => acts.push("inform_ticket_count"),
            "movie" => acts.push("inform_movie_choice"),
            _ => {}
        }
        turn(vec![act_slot("request", slot)], request_phrase(slot), intent, &acts, u)
    } else if roll < 0.65 {
        // The system offers a concrete option; the user selects it.
        let (slot, sys_phrase) = if spec.name == "sim-r" {
            ("restaurant_name", "how about")
        } else if rng.gen_bool(0.5) {
            ("theatre_name", "how about")
        } else {
            ("time", "there is a showing at")
        };
        let value = value_for(slot, world, rng);
        let mut u = Utt::default();
        let reveal = rng.gen_bool(0.6);
        if reveal {
            u.say("yes").say(verb).say("at");
        }
        u.slot(slot, &value);
        if !reveal {
            u.say("sounds good");
        }
        let sys = format!("{sys_phrase} {value}");
        turn(vec![act_value("offer", slot, &value)], &sys, intent, &["select"], u)
    } else if roll < 0.80 {
        // The system reads back a value; the user confirms.
        let slot = pick(rng, spec.requestable);
        let value = value_for(slot, world, rng);
        let sys = format!("so {value} is that right");
        let mut u = Utt::default();
        let (acts, phrase): (Vec<&str>, &str) = if rng.gen_bool(0.6) {
            match intent {
                RESERVE => (vec!["affirm", "confirm_reservation"], "yes book it"),
                FIND => (vec!["affirm"], "yes show me those places"),
                BUY => (vec!["affirm", "confirm_tickets"], "yes buy the tickets"),
                other => unreachable!("unknown intent {other}"),
            }
        } else {
            (vec!["affirm"], pick(rng, &["yes that works", "yes", "that is right"]))
        };
        u.say(phrase);
        turn(vec![act_value("confirm", slot, &value)], &sys, intent, &acts, u)
    } else if roll < 0.87 {
        // The user rejects a read-back and supplies a correction.
        let slot = if rng.gen_bool(0.5) { "time" } else { "date" };
        let old = value_for(slot, world, rng);
        let new = value_for(slot, world, rng);
        let sys = format!("so {old} is that right");
        let mut u = Utt::default();
        if rng.gen_bool(0.6) {
            u.say("no change the").say(match intent {
                RESERVE => "reservation",
                FIND => "search",
                BUY => "tickets",
                other => unreachable!("unknown intent {other}"),
            });
            u.say("to").slot(slot, &new);
        } else {
            u.say("no make it").slot(slot, &new);
        }
        turn(vec![act_value("confirm", slot, &old)], &sys, intent, &["negate", "inform"], u)
    } else if roll < 0.93 {
        // Nothing available: the user asks for alternatives.
        let old = value_for("time", world, rng);
        let new = value_for("time", world, rng);
        let sys = format!("nothing is available at {old}");
        let mut u = Utt::default();
        u.say("do you have anything at").slot("time", &new);
        let mut acts = vec!["request_alts"];
        if spec.name == "sim-r" {
            if rng.gen_bool(0.5) {
                acts.push("request_availability");
            }
        } else if rng.gen_bool(0.5) {
            acts.push("request_showtimes");
        }
        turn(vec![act_value("notify_failure", "time", &old)], &sys, intent, &acts, u)
    } else if roll < 0.97 {
        // The user asks a question instead of answering.
        let mut acts = vec!["request"];
        let u_phrase = if spec.name == "sim-r" {
            pick(rng, &["what is the price range there", "how well rated is it"])
        } else {
            acts.push("request_showtimes");
            "what times is it playing"
        };
        let mut u = Utt::default();
        u.say(u_phrase);
        let slot = pick(rng, spec.requestable);
        let value = value_for(slot, world, rng);
        let sys = format!("i can offer {value}");
        turn(vec![act_value("offer", slot, &value)], &sys, intent, &acts, u)
    } else {
        // Noise: hesitation, denial, or a parse failure.
        let slot = pick(rng, spec.requestable);
        let (acts, phrase): (Vec<&str>, &str) = match rng.gen_range(0..3) {
            0 => (vec!["cant_understand"], "sorry what was that"),
            1 => (vec!["other"], "hmm give me a moment"),
            _ => (vec!["deny"], "no not that"),
        };
        let mut u = Utt::default();
        u.say(phrase);
        turn(vec![act_slot("request", slot)], request_phrase(slot), intent, &acts, u)
    }
}

fn closing(spec: &DomainSpec, intent: &str, rng: &mut ChaCha20Rng) -> Turn {
    // A small share of restaurant dialogues end in a cancellation.
    if spec.name == "sim-r" && rng.gen_bool(0.02) {
        let mut u = Utt::default();
        u.say("no cancel the whole thing");
        return turn(
            vec![act("confirm")],
            "shall i place the booking",
            intent,
            &["negate", "cancel_reservation"],
            u,
        );
    }
    let sys = if spec.name == "sim-r" {
        "your table is booked enjoy your meal"
    } else {
        "your tickets are ready enjoy the movie"
    };
    let mut u = Utt::default();
    if rng.gen_bool(0.7) {
        u.say(if spec.name == "sim-r" {
            "thanks for the booking goodbye"
        } else {
            "thanks for the tickets goodbye"
        });
    } else {
        u.say("thank you goodbye");
    }
    turn(vec![act("notify_success")], sys, intent, &["thank_you", "good_bye"], u)
}

// ─── Dialogue and split assembly ─────────────────────────────────────────────

fn dialogue(
    spec: &DomainSpec,
    split: &str,
    index: usize,
    len: usize,
    world: &World,
    seed: u64,
) -> Dialogue {
    let mut rng = per_dialogue_rng(seed, spec.name, split, index);
    let intent = if spec.name == "sim-m" {
        BUY
    } else if rng.gen_bool(0.5) {
        RESERVE
    } else {
        FIND
    };
    let mut turns = Vec::with_capacity(len);
    turns.push(opening(spec, intent, world, &mut rng));
    for _ in 0..len.saturating_sub(2) {
        turns.push(middle(spec, intent, world, &mut rng));
    }
    turns.push(closing(spec, intent, &mut rng));
    Dialogue {
        id: format!("{}-{}-{:04}", spec.name, split, index),
        domain: spec.name.to_string(),
        turns,
    }
}

/// Independent per-dialogue stream so generation order never matters.
fn per_dialogue_rng(seed: u64, domain: &str, split: &str, index: usize) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(domain.as_bytes());
    hasher.update([0u8]);
    hasher.update(split.as_bytes());
    hasher.update([0u8]);
    hasher.update((index as u64).to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

/// Samples dialogue lengths in [8, 12], then nudges them within [4, 16] until
/// they sum to `exact_total` if one is required.
fn lengths(
    rng: &mut ChaCha20Rng,
    count: usize,
    exact_total: Option<usize>,
) -> Vec<usize> {
    const MIN: usize = 4;
    const MAX: usize = 16;
    let mut lens: Vec<usize> = (0..count).map(|_| rng.gen_range(8..=12)).collect();
    if let Some(target) = exact_total {
        assert!(
            (count * MIN..=count * MAX).contains(&target),
            "target {target} unreachable with {count} dialogues"
        );
        loop {
            let sum: usize = lens.iter().sum();
            if sum == target {
                break;
            }
            let i = rng.gen_range(0..count);
            if sum > target && lens[i] > MIN {
                lens[i] -= 1;
            } else if sum < target && lens[i] < MAX {
                lens[i] += 1;
            }
        }
    }
    lens
}

struct SplitPlan {
    split: &'static str,
    dialogues: usize,
    exact_turns: Option<usize>,
}

fn plan(domain: &str) -> [SplitPlan; 3] {
    match domain {
        "sim-r" => [
            SplitPlan { split: "train", dialogues: 1116, exact_turns: Some(11234) },
            SplitPlan { split: "dev", dialogues: 349, exact_turns: None },
            SplitPlan { split: "test", dialogues: 775, exact_turns: None },
        ],
        "sim-m" => [
            SplitPlan { split: "train", dialogues: 384, exact_turns: Some(3562) },
            SplitPlan { split: "dev", dialogues: 120, exact_turns: None },
            SplitPlan { split: "test", dialogues: 264, exact_turns: None },
        ],
        other => unreachable!("unknown domain {other}"),
    }
}

/// Generates one (domain, split) in memory.
pub fn generate_split(domain: &str, split: &str, seed: u64) -> Vec<Dialogue> {
    let spec = if domain == "sim-r" { &SIM_R } else { &SIM_M };
    let (train_world, eval_world, _) = build_worlds(seed);
    let world = if split == "train" { &train_world } else { &eval_world };
    let plan_entry = plan(domain)
        .into_iter()
        .find(|p| p.split == split)
        .unwrap_or_else(|| panic!("unknown split {split}"));
    let mut len_rng = per_dialogue_rng(seed, domain, split, usize::MAX);
    let lens = lengths(&mut len_rng, plan_entry.dialogues, plan_entry.exact_turns);
    lens.iter()
        .enumerate()
        .map(|(i, &len)| dialogue(spec, split, i, len, world, seed))
        .collect()
}

// ─── Public-schema serialization ─────────────────────────────────────────────

fn act_json(a: &DialogueAct) -> Value {
    let mut obj = serde_json::Map::new();
    obj.insert("type".into(), json!(a.act_type));
    if let Some(s) = &a.slot {
        obj.insert("slot".into(), json!(s));
    }
    if let Some(v) = &a.value {
        obj.insert("value".into(), json!(v));
    }
    Value::Object(obj)
}

fn dialogue_json(d: &Dialogue) -> Value {
    let turns: Vec<Value> = d
        .turns
        .iter()
        .enumerate()
        .map(|(i, t)| {
            // Intents are only marked where they change; the loader carries
            // them forward.
            let intents: Vec<&str> = if i == 0 || d.turns[i - 1].intent != t.intent {
                vec![t.intent.as_str()]
            } else {
                vec![]
            };
            json!({
                "system_acts": t.system_acts.iter().map(act_json).collect::<Vec<_>>(),
                "system_utterance": { "tokens": t.system_tokens },
                "user_acts": t.user_acts.iter().map(|a| json!({ "type": a })).collect::<Vec<_>>(),
                "user_intents": intents,
                "user_utterance": {
                    "tokens": t.user_tokens,
                    "slots": t.slot_spans.iter().map(|s| json!({
                        "slot": s.slot,
                        "start": s.start,
                        "exclusive_end": s.exclusive_end,
                    })).collect::<Vec<_>>(),
                },
            })
        })
        .collect();
    json!({ "dialogue_id": d.id, "turns": turns })
}

pub fn write_split(path: &Path, dialogues: &[Dialogue]) -> Result<(), CorpusError> {
    let doc = Value::Array(dialogues.iter().map(dialogue_json).collect());
    let text = serde_json::to_string(&doc).expect("corpus JSON serializes");
    fs::write(path, text)
        .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
}

#[derive(Debug, Clone)]
pub struct SynthStats {
    /// (domain, split) → sizes, in generation order.
    pub counts: Vec<(String, String, SplitCounts)>,
    /// Fraction of distinct eval movie names also present in training.
    pub movie_name_overlap: f64,
}

/// Writes `root/<domain>/{train,dev,test}.json` for both domains.
pub fn synthesize(root: &Path, seed: u64) -> Result<SynthStats, CorpusError> {
    let (_, _, movie_name_overlap) = build_worlds(seed);
    let mut counts = Vec::new();
    for domain in DOMAINS {
        let dir = root.join(domain);
        fs::create_dir_all(&dir)
            .map_err(|source| CorpusError::Io { path: dir.display().to_string(), source })?;
        for p in plan(domain) {
            let dialogues = generate_split(domain, p.split, seed);
            write_split(&dir.join(format!("{}.json", p.split)), &dialogues)?;
            counts.push((domain.to_string(), p.split.to_string(), count_split(&dialogues)));
        }
    }
    Ok(SynthStats { counts, movie_name_overlap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        expected_train_counts, iob_to_spans, spans_to_iob, PreparedCorpus, Vocab,
    };
    use std::path::PathBuf;

    fn scratch_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir()
            .join(format!("slu-synth-{tag}-{}", std::process::id()));
        if dir.exists() {
            std::fs::remove_dir_all(&dir).unwrap();
        }
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn train_splits_hit_published_counts_exactly() {
        for domain in DOMAINS {
            let dialogues = generate_split(domain, "train", 7);
            let got = count_split(&dialogues);
            assert_eq!(got, expected_train_counts(domain).unwrap(), "{domain}");
        }
    }

    #[test]
    fn corpus_prepares_with_count_validation_and_has_published_vocab_shape() {
        let dir = scratch_dir("prepare");
        synthesize(&dir, 7).unwrap();
        let corpus = PreparedCorpus::prepare(
            &dir,
            &DOMAINS.map(String::from),
            false,
        )
        .unwrap();
        assert_eq!(corpus.vocab.slots.len(), 12);
        assert_eq!(corpus.vocab.user_acts.len(), 21);
        assert_eq!(corpus.vocab.intents.len(), 3);
        assert!(!corpus.dev.is_empty() && !corpus.test.is_empty());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn two_slots_and_twelve_user_acts_are_shared_between_domains() {
        let slot_set = |domain: &str| -> BTreeSet<String> {
            generate_split(domain, "train", 7)
                .iter()
                .flat_map(|d| &d.turns)
                .flat_map(|t| &t.slot_spans)
                .map(|s| s.slot.clone())
                .collect()
        };
        let r = slot_set("sim-r");
        let m = slot_set("sim-m");
        let shared: BTreeSet<_> = r.intersection(&m).cloned().collect();
        assert_eq!(shared, ["date", "time"].iter().map(|s| s.to_string()).collect());
        assert_eq!(r.union(&m).count(), 12);

        let act_set = |domain: &str| -> BTreeSet<String> {
            generate_split(domain, "train", 7)
                .iter()
                .flat_map(|d| &d.turns)
                .flat_map(|t| t.user_acts.iter().cloned())
                .collect()
        };
        let r = act_set("sim-r");
        let m = act_set("sim-m");
        assert_eq!(r.intersection(&m).count(), 12);
        assert_eq!(r.union(&m).count(), 21);
    }

    #[test]
    fn eval_movie_names_overlap_training_at_published_rate() {
        let (_, _, overlap) = build_worlds(7);
        assert!(
            (0.05..=0.20).contains(&overlap),
            "movie-name overlap {overlap} outside the plausible band"
        );

        // The same fraction measured on the generated data.
        let train: BTreeSet<String> = movie_values(&generate_split("sim-m", "train", 7));
        let mut eval = movie_values(&generate_split("sim-m", "dev", 7));
        eval.extend(movie_values(&generate_split("sim-m", "test", 7)));
        let reused = eval.iter().filter(|v| train.contains(*v)).count();
        let measured = reused as f64 / eval.len() as f64;
        assert!(
            (0.05..=0.20).contains(&measured),
            "measured movie-name overlap {measured} outside the plausible band"
        );
    }

    fn movie_values(dialogues: &[Dialogue]) -> BTreeSet<String> {
        dialogues
            .iter()
            .flat_map(|d| &d.turns)
            .flat_map(|t| {
                t.slot_spans.iter().filter(|s| s.slot == "movie").map(|s| {
                    t.user_tokens[s.start..s.exclusive_end].join(" ")
                })
            })
            .collect()
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = generate_split("sim-r", "dev", 7);
        let b = generate_split("sim-r", "dev", 7);
        assert_eq!(a, b);
        let c = generate_split("sim-r", "dev", 8);
        assert_ne!(a, c);
    }

    #[test]
    fn written_files_round_trip_through_the_loader() {
        let dir = scratch_dir("roundtrip");
        let dialogues = generate_split("sim-m", "dev", 7);
        let path = dir.join("dev.json");
        write_split(&path, &dialogues).unwrap();
        let loaded = crate::corpus::load_split(&path, "sim-m").unwrap();
        assert_eq!(dialogues, loaded);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn every_gold_turn_survives_an_iob_round_trip() {
        let mut dialogues = Vec::new();
        for domain in DOMAINS {
            for split in ["train", "dev", "test"] {
                dialogues.extend(generate_split(domain, split, 7));
            }
        }
        let vocab = Vocab::build(&dialogues).unwrap();
        let mut checked = 0usize;
        for d in &dialogues {
            for t in &d.turns {
                let mut gold: Vec<(usize, usize, usize)> = t
                    .slot_spans
                    .iter()
                    .map(|s| {
                        (vocab.slots.get(&s.slot).unwrap(), s.start, s.exclusive_end)
                    })
                    .collect();
                let tags = spans_to_iob(t.user_tokens.len(), &gold, &vocab.slots)
                    .unwrap_or_else(|e| panic!("{}: {e}", d.id));
                let spans = iob_to_spans(&tags);
                gold.sort_unstable_by_key(|&(_, start, _)| start);
                assert_eq!(spans, gold, "{}", d.id);
                checked += 1;
            }
        }
        assert!(checked > 20_000, "only {checked} turns checked");
    }

    #[test]
    fn bare_number_answers_are_cross_domain_ambiguous() {
        // The same single-token utterance must appear under num_people in one
        // domain and num_tickets in the other, with a meaningful count each —
        // this is what makes system-act context necessary for tagging.
        let bare_count = |domain: &str, slot: &str| -> usize {
            generate_split(domain, "train", 7)
                .iter()
                .flat_map(|d| &d.turns)
                .filter(|t| {
                    t.slot_spans.len() == 1
                        && t.slot_spans[0].slot == slot
                        && t.slot_spans[0].exclusive_end - t.slot_spans[0].start
                            == t.user_tokens.len()
                })
                .count()
        };
        let people = bare_count("sim-r", "num_people");
        let tickets = bare_count("sim-m", "num_tickets");
        assert!(people > 100, "only {people} bare num_people turns");
        assert!(tickets > 100, "only {tickets} bare num_tickets turns");
    }
}
