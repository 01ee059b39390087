use std::fmt;

use crate::base_model::AttentionSequence;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SnippetKind {
    Action,
    Background,
    Ambiguous,
}

impl SnippetKind {
    pub fn tag(self) -> &'static str {
        match self {
            SnippetKind::Action => "action",
            SnippetKind::Background => "background",
            SnippetKind::Ambiguous => "ambiguous",
        }
    }
}

impl fmt::Display for SnippetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Disjoint cover of the snippet positions `0..T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnippetPartition {
    kinds: Vec<SnippetKind>,
    action: Vec<usize>,
    background: Vec<usize>,
    ambiguous: Vec<usize>,
}

impl SnippetPartition {
    pub fn from_kinds(kinds: Vec<SnippetKind>) -> Self {
        let pick = |k: SnippetKind| -> Vec<usize> {
            kinds
                .iter()
                .enumerate()
                .filter(|(_, &x)| x == k)
                .map(|(i, _)| i)
                .collect()
        };
        let action = pick(SnippetKind::Action);
        let background = pick(SnippetKind::Background);
        let ambiguous = pick(SnippetKind::Ambiguous);
        Self {
            kinds,
            action,
            background,
            ambiguous,
        }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn kind(&self, t: usize) -> SnippetKind {
        self.kinds[t]
    }

    pub fn kinds(&self) -> &[SnippetKind] {
        &self.kinds
    }

    /// Pseudo-action positions, ascending.
    pub fn action(&self) -> &[usize] {
        &self.action
    }

    pub fn background(&self) -> &[usize] {
        &self.background
    }

    pub fn ambiguous(&self) -> &[usize] {
        &self.ambiguous
    }

    /// Reassigns every ambiguous snippet to the action side when its fused
    /// attention is at least 0.5 and to the background side otherwise.
    pub fn merge_ambiguous(&self, fused: &AttentionSequence) -> Result<Self> {
        if fused.len() != self.len() {
            return Err(Error::Shape(format!(
                "partition covers {} snippets, attention {}",
                self.len(),
                fused.len()
            )));
        }
        let kinds = self
            .kinds
            .iter()
            .zip(fused.as_slice())
            .map(|(&k, &a)| match k {
                SnippetKind::Ambiguous if a >= 0.5 => SnippetKind::Action,
                SnippetKind::Ambiguous => SnippetKind::Background,
                other => other,
            })
            .collect();
        Ok(Self::from_kinds(kinds))
    }
}

/// Two-stream pre-classification: pseudo-action when both streams exceed
/// `eta`, pseudo-background when both fall below `1 - eta`, ambiguous
/// otherwise.
pub fn preclassify(ar: &AttentionSequence, af: &AttentionSequence, eta: f64) -> Result<SnippetPartition> {
    if ar.len() != af.len() {
        return Err(Error::Shape(format!(
            "attention lengths differ: {} vs {}",
            ar.len(),
            af.len()
        )));
    }
    let kinds = ar
        .as_slice()
        .iter()
        .zip(af.as_slice())
        .map(|(&r, &f)| {
            if r > eta && f > eta {
                SnippetKind::Action
            } else if r < 1.0 - eta && f < 1.0 - eta {
                SnippetKind::Background
            } else {
                SnippetKind::Ambiguous
            }
        })
        .collect();
    Ok(SnippetPartition::from_kinds(kinds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn att(v: &[f64]) -> AttentionSequence {
        AttentionSequence::from_slice(v).unwrap()
    }

    #[test]
    fn rule_application() {
        let p = preclassify(&att(&[0.7, 0.3, 0.7, 0.5]), &att(&[0.6, 0.2, 0.3, 0.9]), 0.5).unwrap();
        assert_eq!(
            p.kinds(),
            &[
                SnippetKind::Action,
                SnippetKind::Background,
                SnippetKind::Ambiguous,
                SnippetKind::Ambiguous
            ]
        );
        assert_eq!(p.action(), &[0]);
        assert_eq!(p.background(), &[1]);
        assert_eq!(p.ambiguous(), &[2, 3]);
    }

    #[test]
    fn sets_cover_positions_disjointly() {
        let ar = att(&[0.1, 0.9, 0.55, 0.45, 0.8, 0.2]);
        let af = att(&[0.2, 0.95, 0.65, 0.1, 0.3, 0.7]);
        for eta in [0.5, 0.6, 0.8] {
            let p = preclassify(&ar, &af, eta).unwrap();
            let mut all: Vec<usize> = p
                .action()
                .iter()
                .chain(p.background())
                .chain(p.ambiguous())
                .copied()
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn merge_sends_ambiguous_by_fused_attention() {
        let p = SnippetPartition::from_kinds(vec![
            SnippetKind::Ambiguous,
            SnippetKind::Ambiguous,
            SnippetKind::Action,
        ]);
        let merged = p.merge_ambiguous(&att(&[0.6, 0.4, 0.9])).unwrap();
        assert_eq!(merged.action(), &[0, 2]);
        assert_eq!(merged.background(), &[1]);
        assert!(merged.ambiguous().is_empty());
    }
}
