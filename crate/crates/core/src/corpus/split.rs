use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AnnotatedNote, ClassLabel};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<AnnotatedNote>,
    pub val: Vec<AnnotatedNote>,
    pub test: Vec<AnnotatedNote>,
}

/// Number of gold spans per class.
pub fn span_counts(notes: &[AnnotatedNote]) -> [usize; 8] {
    let mut counts = [0; 8];
    for n in notes {
        for s in &n.spans {
            counts[s.label.index()] += 1;
        }
    }
    counts
}

/// Splits notes into train/val/test with exact note counts
/// (`round(r·n)` for the first two) while keeping each class's span share
/// close to the ratios.
///
/// Iterative stratification: the rarest remaining class is placed first, each
/// of its notes going to the split that still wants the most of that class.
pub fn split_corpus(notes: &[AnnotatedNote], ratios: [f64; 3], seed: u64) -> Result<Split> {
    let total_ratio: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (total_ratio - 1.0).abs() > 1e-9 {
        return Err(Error::validation(
            "ratios",
            format!("{ratios:?} must be probabilities summing to 1"),
        ));
    }
    let totals = span_counts(notes);
    if let Some(c) = ClassLabel::ALL.iter().find(|c| totals[c.index()] < 3) {
        return Err(Error::Stratification(format!(
            "class {c} has {} spans, at least 3 are needed",
            totals[c.index()]
        )));
    }

    let n = notes.len();
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let mut capacity = [n_train, n_val, n - n_train - n_val];
    let mut desired: [[f64; 8]; 3] = [[0.0; 8]; 3];
    for s in 0..3 {
        for c in 0..8 {
            desired[s][c] = ratios[s] * totals[c] as f64;
        }
    }
    let per_note: Vec<[usize; 8]> = notes
        .iter()
        .map(|n| span_counts(std::slice::from_ref(n)))
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let mut remaining = totals;

    loop {
        let Some(class) = (0..8)
            .filter(|&c| remaining[c] > 0)
            .min_by_key(|&c| remaining[c])
        else {
            break;
        };
        for &i in &order {
            if assigned[i].is_some() || per_note[i][class] == 0 {
                continue;
            }
            let pick = (0..3)
                .filter(|&s| capacity[s] > 0)
                .max_by(|&a, &b| {
                    desired[a][class]
                        .total_cmp(&desired[b][class])
                        .then(capacity[a].cmp(&capacity[b]))
                        .then(b.cmp(&a))
                })
                .expect("capacities sum to the number of notes");
            place(
                i,
                pick,
                &per_note,
                &mut assigned,
                &mut capacity,
                &mut desired,
                &mut remaining,
            );
        }
    }
    for &i in &order {
        if assigned[i].is_none() {
            let pick = (0..3)
                .max_by(|&a, &b| capacity[a].cmp(&capacity[b]).then(b.cmp(&a)))
                .unwrap();
            place(
                i,
                pick,
                &per_note,
                &mut assigned,
                &mut capacity,
                &mut desired,
                &mut remaining,
            );
        }
    }

    let mut split = Split {
        train: Vec::with_capacity(n_train),
        val: Vec::with_capacity(n_val),
        test: Vec::new(),
    };
    for (note, s) in notes.iter().zip(assigned) {
        match s.expect("every note is assigned") {
            0 => split.train.push(note.clone()),
            1 => split.val.push(note.clone()),
            _ => split.test.push(note.clone()),
        }
    }
    Ok(split)
}

fn place(
    i: usize,
    pick: usize,
    per_note: &[[usize; 8]],
    assigned: &mut [Option<usize>],
    capacity: &mut [usize; 3],
    desired: &mut [[f64; 8]; 3],
    remaining: &mut [usize; 8],
) {
    assigned[i] = Some(pick);
    capacity[pick] -= 1;
    for c in 0..8 {
        desired[pick][c] -= per_note[i][c] as f64;
        remaining[c] -= per_note[i][c];
    }
}

/// Inverse-frequency weights normalized to mean 1.
pub fn class_weights_from_counts(counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        let name = ClassLabel::from_index(i).map_or_else(|| i.to_string(), |c| c.to_string());
        return Err(Error::Data(format!(
            "class {name} is absent from the training split"
        )));
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.into_iter().map(|w| w / mean).collect())
}

pub fn class_weights(train: &[AnnotatedNote]) -> Result<Vec<f64>> {
    class_weights_from_counts(&span_counts(train))
}
