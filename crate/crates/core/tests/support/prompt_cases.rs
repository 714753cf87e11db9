//! Random compose inputs and the properties every accepted prompt must hold.

use chrono::Utc;
use proptest::prelude::*;
use tutor_core::prompt::{compose, estimate_tokens, ComposeError, MARKER_OPEN};
use tutor_core::rag::{DocumentChunk, RetrievedChunk};
use tutor_core::{ChatTurn, ResponseLevel, Role};

#[derive(Debug, Clone)]
pub struct ComposeCase {
    pub level: ResponseLevel,
    pub history: Vec<ChatTurn>,
    pub retrieved: Vec<RetrievedChunk>,
    pub query: String,
    pub budget: usize,
}

fn filler() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => "[a-z ]{0,300}",
        1 => "[a-z ]{0,40}\\[\\[LEVEL:Technical\\]\\][a-z ]{0,40}",
        1 => "[a-zA-Z\\[\\]: ]{0,80}",
    ]
}

fn turns() -> impl Strategy<Value = Vec<ChatTurn>> {
    prop::collection::vec(filler(), 0..12).prop_map(|texts| {
        texts
            .into_iter()
            .enumerate()
            .map(|(i, t)| ChatTurn {
                role: if i % 2 == 0 { Role::User } else { Role::Assistant },
                text: format!("turn{i:03}x {t}"),
                at: Utc::now(),
                metrics: None,
                complete: true,
            })
            .collect()
    })
}

fn chunks() -> impl Strategy<Value = Vec<RetrievedChunk>> {
    prop::collection::vec(filler(), 0..8).prop_map(|texts| {
        texts
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let text = format!("chunk{i:03}x {t}");
                RetrievedChunk {
                    chunk: DocumentChunk {
                        doc_id: format!("d{i}"),
                        chunk_index: 0,
                        estimated_tokens: estimate_tokens(&text),
                        text,
                        source_name: format!("notes{i}.md"),
                    },
                    score: 10.0 - i as f64,
                    rank: i + 1,
                }
            })
            .collect()
    })
}

/// Chunks arrive rotated so that input order differs from rank order.
pub fn compose_case() -> impl Strategy<Value = ComposeCase> {
    (
        prop::sample::select(ResponseLevel::ALL.to_vec()),
        turns(),
        chunks(),
        "[a-z?]{1,60}",
        0usize..1500,
        any::<u64>(),
    )
        .prop_map(|(level, history, mut retrieved, query, budget, seed)| {
            let n = retrieved.len();
            if n > 1 {
                retrieved.rotate_left((seed as usize) % n);
            }
            ComposeCase {
                level,
                history,
                retrieved,
                query,
                budget,
            }
        })
}

pub fn check_case(case: &ComposeCase) -> Result<(), TestCaseError> {
    let ComposeCase {
        level,
        history,
        retrieved,
        query,
        budget,
    } = case;
    let (level, budget) = (*level, *budget);
    let n = retrieved.len();
    match compose(level, history, retrieved, query, budget) {
        Ok(p) => {
            prop_assert!(p.estimated_tokens <= budget);
            prop_assert_eq!(p.estimated_tokens, estimate_tokens(&p.text));
            prop_assert_eq!(p.text.matches(MARKER_OPEN).count(), 1);
            prop_assert!(p.text.starts_with(&level.marker()));
            prop_assert!(p.text.ends_with("Answer:"));

            // Recency: the kept turns are exactly the newest ones, in order.
            prop_assert!(p.dropped_turns <= history.len());
            let mut last = 0;
            for i in 0..history.len() {
                let tag = format!("turn{i:03}x");
                let found = p.text.find(&tag);
                if i < p.dropped_turns {
                    prop_assert!(found.is_none(), "{} kept but dropped_turns={}", tag, p.dropped_turns);
                } else {
                    let at = found.expect("kept turn present");
                    prop_assert!(at >= last);
                    last = at;
                }
            }

            // Rank preservation: kept chunks are the best-ranked, in rank order.
            prop_assert!(p.dropped_chunks <= n);
            if p.dropped_chunks > 0 {
                prop_assert_eq!(p.dropped_turns, history.len());
            }
            let kept = n - p.dropped_chunks;
            let mut last = 0;
            for rank in 1..=n {
                let tag = format!("chunk{:03}x", rank - 1);
                let found = p.text.find(&tag);
                if rank <= kept {
                    let at = found.expect("kept chunk present");
                    prop_assert!(at >= last);
                    last = at;
                } else {
                    prop_assert!(found.is_none());
                }
            }
        }
        Err(ComposeError::BudgetTooSmall { budget: b, required }) => {
            prop_assert_eq!(b, budget);
            prop_assert!(required > budget);
            // Not even the bare prompt fits.
            prop_assert!(compose(level, &[], &[], query, budget).is_err());
        }
        Err(e) => prop_assert!(false, "unexpected {e:?}"),
    }
    Ok(())
}
