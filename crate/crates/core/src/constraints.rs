//! Legal-action masks for autoregressive traversal sampling.
//!
//! The structural rules depend only on the partial traversal; the variable
//! gate is folded in afterwards by [`compose_gate`].

use crate::expr::{needed_slots, ExprError, TokenId, TokenLibrary, Traversal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("invalid mask config: {0}")]
    InvalidConfig(String),
    #[error("partial traversal is already complete")]
    AlreadyComplete,
    #[error("no legal token at length {length} with {slots} open slot(s)")]
    NoLegalToken { length: usize, slots: usize },
    #[error("gate eliminated all variables")]
    GateEliminatedAllVariables,
    #[error("gate has {got} entries but the library has {expected} variables")]
    GateLength { expected: usize, got: usize },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub min_length: usize,
    pub max_length: usize,
    pub forbid_inverse_child: bool,
    pub forbid_trig_descendant: bool,
    pub require_variable: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            min_length: 4,
            max_length: 32,
            forbid_inverse_child: true,
            forbid_trig_descendant: true,
            require_variable: true,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<(), MaskError> {
        if self.min_length < 1 || self.min_length > self.max_length {
            return Err(MaskError::InvalidConfig(format!(
                "need 1 <= min_length ({}) <= max_length ({})",
                self.min_length, self.max_length
            )));
        }
        Ok(())
    }
}

/// Per-token legality for the next sampling step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionMask {
    pub legal: Vec<bool>,
}

impl ActionMask {
    pub fn all(n: usize) -> Self {
        Self { legal: vec![true; n] }
    }

    pub fn count(&self) -> usize {
        self.legal.iter().filter(|&&b| b).count()
    }

    pub fn is_legal(&self, id: TokenId) -> bool {
        self.legal[id.index()]
    }
}

#[derive(Debug, Clone, Copy)]
struct OpenNode {
    token: TokenId,
    remaining: u8,
    first_child: Option<TokenId>,
}

/// Incremental view of a partial traversal: the chain of unfinished
/// ancestors of the next slot, plus the counters the mask rules need.
#[derive(Debug, Clone)]
pub struct TreeCursor {
    open: Vec<OpenNode>,
    length: usize,
    slots: usize,
    trig_open: usize,
    has_variable: bool,
}

impl Default for TreeCursor {
    fn default() -> Self {
        Self::new()
    }
}

impl TreeCursor {
    pub fn new() -> Self {
        Self {
            open: Vec::new(),
            length: 0,
            slots: 1,
            trig_open: 0,
            has_variable: false,
        }
    }

    pub fn from_partial(partial: &Traversal, lib: &TokenLibrary) -> Result<Self, MaskError> {
        needed_slots(partial, lib)?;
        let mut cursor = Self::new();
        for &id in &partial.tokens {
            cursor.push(id, lib);
        }
        Ok(cursor)
    }

    /// Appends a token; the caller guarantees the traversal is not complete.
    pub fn push(&mut self, id: TokenId, lib: &TokenLibrary) {
        debug_assert!(self.slots > 0);
        if let Some(parent) = self.open.last_mut() {
            if parent.first_child.is_none() {
                parent.first_child = Some(id);
            }
            parent.remaining -= 1;
        }
        let arity = lib.arity(id);
        self.length += 1;
        self.slots = self.slots - 1 + arity;
        self.has_variable |= lib.is_variable(id);
        if arity > 0 {
            if lib.is_trig(id) {
                self.trig_open += 1;
            }
            self.open.push(OpenNode {
                token: id,
                remaining: arity as u8,
                first_child: None,
            });
        }
        while let Some(top) = self.open.last() {
            if top.remaining > 0 {
                break;
            }
            if lib.is_trig(top.token) {
                self.trig_open -= 1;
            }
            self.open.pop();
        }
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn is_complete(&self) -> bool {
        self.slots == 0
    }

    /// Operator owning the next slot.
    pub fn parent(&self) -> Option<TokenId> {
        self.open.last().map(|n| n.token)
    }

    /// Root token of the already-filled left sibling of the next slot.
    pub fn sibling(&self, lib: &TokenLibrary) -> Option<TokenId> {
        let top = self.open.last()?;
        if lib.arity(top.token) == 2 && top.remaining == 1 {
            top.first_child
        } else {
            None
        }
    }

    pub fn has_trig_ancestor(&self) -> bool {
        self.trig_open > 0
    }

    pub fn has_variable(&self) -> bool {
        self.has_variable
    }

    /// Structural legality of every library token at the next slot.
    pub fn structural_mask_into(
        &self,
        lib: &TokenLibrary,
        cfg: &MaskConfig,
        legal: &mut [bool],
    ) -> Result<(), MaskError> {
        if self.is_complete() {
            return Err(MaskError::AlreadyComplete);
        }
        let parent = self.parent();
        let trig_ancestor = self.has_trig_ancestor();
        let last_slot = self.slots == 1;
        let mut any = false;
        for (i, l) in legal.iter_mut().enumerate() {
            let id = TokenId(i as u8);
            let arity = lib.arity(id);
            let mut ok = self.length + self.slots + arity <= cfg.max_length;
            if ok && cfg.forbid_inverse_child {
                if let Some(p) = parent {
                    ok = lib.inverse_of(p) != Some(id);
                }
            }
            if ok && cfg.forbid_trig_descendant && trig_ancestor {
                ok = !lib.is_trig(id);
            }
            if ok && arity == 0 && last_slot {
                let too_short = self.length + 1 < cfg.min_length;
                let no_variable = cfg.require_variable && !self.has_variable && !lib.is_variable(id);
                ok = !(too_short || no_variable);
            }
            *l = ok;
            any |= ok;
        }
        if any {
            Ok(())
        } else {
            Err(MaskError::NoLegalToken {
                length: self.length,
                slots: self.slots,
            })
        }
    }
}

/// Mask of structurally legal next tokens for a partial traversal.
pub fn structural_mask(
    partial: &Traversal,
    lib: &TokenLibrary,
    cfg: &MaskConfig,
) -> Result<ActionMask, MaskError> {
    cfg.validate()?;
    let cursor = TreeCursor::from_partial(partial, lib)?;
    let mut legal = vec![false; lib.len()];
    cursor.structural_mask_into(lib, cfg, &mut legal)?;
    Ok(ActionMask { legal })
}

/// Clears gated-off variables from a mask in place; operators are untouched.
pub fn apply_gate(legal: &mut [bool], lib: &TokenLibrary, gates: &[bool]) -> Result<(), MaskError> {
    if gates.len() != lib.n_variables() {
        return Err(MaskError::GateLength {
            expected: lib.n_variables(),
            got: gates.len(),
        });
    }
    for (&id, &open) in lib.variable_tokens().iter().zip(gates) {
        if !open {
            legal[id.index()] = false;
        }
    }
    if legal.iter().any(|&b| b) {
        Ok(())
    } else {
        Err(MaskError::GateEliminatedAllVariables)
    }
}

/// Elementwise product of the structural mask with the variable gate.
pub fn compose_gate(
    structural: &ActionMask,
    lib: &TokenLibrary,
    gates: &[bool],
) -> Result<ActionMask, MaskError> {
    if !gates.is_empty() && gates.iter().all(|&g| !g) {
        return Err(MaskError::GateEliminatedAllVariables);
    }
    let mut legal = structural.legal.clone();
    apply_gate(&mut legal, lib, gates)?;
    Ok(ActionMask { legal })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::TokenKind;
    use proptest::prelude::*;

    fn names(mask: &ActionMask, lib: &TokenLibrary) -> Vec<String> {
        lib.tokens()
            .iter()
            .filter(|t| mask.legal[t.id.index()])
            .map(|t| t.name.clone())
            .collect()
    }

    fn p(text: &str, lib: &TokenLibrary) -> Traversal {
        Traversal::parse(text, lib).unwrap()
    }

    #[test]
    fn log_child_cannot_be_exp() {
        let lib = TokenLibrary::standard(1);
        let m = structural_mask(&p("log", &lib), &lib, &MaskConfig::default()).unwrap();
        assert!(!m.is_legal(lib.by_name("exp").unwrap()));
        assert!(m.is_legal(lib.by_name("log").unwrap()));
        let m = structural_mask(&p("exp", &lib), &lib, &MaskConfig::default()).unwrap();
        assert!(!m.is_legal(lib.by_name("log").unwrap()));
    }

    #[test]
    fn trig_below_trig_is_masked() {
        let lib = TokenLibrary::standard(1);
        let cfg = MaskConfig::default();
        for prefix in ["sin", "cos", "sin add x1 mul", "add x1 cos exp"] {
            let m = structural_mask(&p(prefix, &lib), &lib, &cfg).unwrap();
            assert!(!m.is_legal(lib.by_name("sin").unwrap()), "{prefix}");
            assert!(!m.is_legal(lib.by_name("cos").unwrap()), "{prefix}");
        }
        // trig subtree closed: trig legal again
        let m = structural_mask(&p("add sin x1", &lib), &lib, &cfg).unwrap();
        assert!(m.is_legal(lib.by_name("cos").unwrap()));
    }

    #[test]
    fn length_budget_masks_operators() {
        let lib = TokenLibrary::standard(1);
        let cfg = MaskConfig {
            min_length: 1,
            max_length: 5,
            ..MaskConfig::default()
        };
        let m = structural_mask(&p("add add x1", &lib), &lib, &cfg).unwrap();
        assert_eq!(names(&m, &lib), vec!["x1"]);
    }

    #[test]
    fn min_length_masks_early_terminal() {
        let lib = TokenLibrary::standard(2);
        let cfg = MaskConfig::default();
        let m = structural_mask(&p("sin", &lib), &lib, &cfg).unwrap();
        assert!(!m.is_legal(lib.by_name("x1").unwrap()));
        let m = structural_mask(&p("add x1", &lib), &lib, &cfg).unwrap();
        assert!(!m.is_legal(lib.by_name("x2").unwrap()));
        let m = structural_mask(&p("add sin x1", &lib), &lib, &cfg).unwrap();
        assert!(m.is_legal(lib.by_name("x2").unwrap()));
    }

    #[test]
    fn cursor_parent_and_sibling() {
        let lib = TokenLibrary::standard(2);
        let c = TreeCursor::from_partial(&p("add x1", &lib), &lib).unwrap();
        assert_eq!(c.parent(), lib.by_name("add"));
        assert_eq!(c.sibling(&lib), lib.by_name("x1"));
        let c = TreeCursor::from_partial(&p("add sin x1", &lib), &lib).unwrap();
        assert_eq!(c.parent(), lib.by_name("add"));
        assert_eq!(c.sibling(&lib), lib.by_name("sin"));
        let c = TreeCursor::from_partial(&p("sin", &lib), &lib).unwrap();
        assert_eq!(c.sibling(&lib), None);
        let c = TreeCursor::from_partial(&Traversal::default(), &lib).unwrap();
        assert_eq!((c.parent(), c.sibling(&lib)), (None, None));
    }

    #[test]
    fn complete_traversal_has_no_mask() {
        let lib = TokenLibrary::standard(1);
        assert_eq!(
            structural_mask(&p("add x1 x1", &lib), &lib, &MaskConfig::default()),
            Err(MaskError::AlreadyComplete)
        );
    }

    #[test]
    fn bad_config_is_rejected() {
        let lib = TokenLibrary::standard(1);
        let cfg = MaskConfig {
            min_length: 9,
            max_length: 4,
            ..MaskConfig::default()
        };
        assert!(matches!(
            structural_mask(&Traversal::default(), &lib, &cfg),
            Err(MaskError::InvalidConfig(_))
        ));
    }

    #[test]
    fn gate_composition() {
        let lib = TokenLibrary::standard(2);
        let all = ActionMask::all(lib.len());
        let m = compose_gate(&all, &lib, &[true, false]).unwrap();
        assert_eq!(m.count(), lib.len() - 1);
        assert!(!m.is_legal(lib.by_name("x2").unwrap()));
        assert!(m.is_legal(lib.by_name("x1").unwrap()));
        assert_eq!(compose_gate(&all, &lib, &[true, true]).unwrap(), all);

        let lib12 = TokenLibrary::standard(12);
        let mut gates = vec![false; 12];
        gates[0] = true;
        gates[1] = true;
        let m = compose_gate(&ActionMask::all(lib12.len()), &lib12, &gates).unwrap();
        let masked_vars = lib12.variable_tokens().iter().filter(|v| !m.is_legal(**v)).count();
        assert_eq!(masked_vars, 10);

        assert_eq!(
            compose_gate(&all, &lib, &[false, false]),
            Err(MaskError::GateEliminatedAllVariables)
        );
        assert!(matches!(compose_gate(&all, &lib, &[true]), Err(MaskError::GateLength { .. })));
    }

    /// Independent oracle: at each step a token is legal iff some completion
    /// within the length limits exists that respects the inverse and trig
    /// rules. Computed from scratch over the explicit ancestor list.
    fn oracle_legal(prefix: &[TokenId], lib: &TokenLibrary, cfg: &MaskConfig) -> Vec<bool> {
        // rebuild ancestors of next slot by explicit tree walk
        let mut stack: Vec<(TokenId, usize)> = Vec::new(); // (token, children seen)
        for &id in prefix {
            if let Some(top) = stack.last_mut() {
                top.1 += 1;
            }
            if lib.arity(id) > 0 {
                stack.push((id, 0));
            }
            while let Some(&(tok, seen)) = stack.last() {
                if seen == lib.arity(tok) {
                    stack.pop();
                } else {
                    break;
                }
            }
        }
        let slots: usize = 1 + prefix.iter().map(|&t| lib.arity(t)).sum::<usize>() - prefix.len();
        let has_var = prefix.iter().any(|&t| lib.is_variable(t));
        lib.tokens()
            .iter()
            .map(|tok| {
                let id = tok.id;
                let a = tok.arity();
                let after_len = prefix.len() + 1;
                let after_slots = slots - 1 + a;
                // shortest completion fills every slot with a terminal
                if after_len + after_slots > cfg.max_length {
                    return false;
                }
                if after_slots == 0 && after_len < cfg.min_length {
                    return false;
                }
                if after_slots == 0 && cfg.require_variable && !has_var && tok.kind() != TokenKind::Variable {
                    return false;
                }
                if cfg.forbid_inverse_child {
                    if let Some(&(parent, _)) = stack.last() {
                        if lib.inverse_of(parent) == Some(id) {
                            return false;
                        }
                    }
                }
                if cfg.forbid_trig_descendant && lib.is_trig(id) && stack.iter().any(|&(t, _)| lib.is_trig(t)) {
                    return false;
                }
                true
            })
            .collect()
    }

    proptest! {
        #[test]
        fn mask_matches_oracle(choices in proptest::collection::vec(any::<u32>(), 1..30),
                               gates in proptest::collection::vec(any::<bool>(), 3)) {
            let lib = TokenLibrary::standard(3);
            let cfg = MaskConfig { min_length: 4, max_length: 12, ..MaskConfig::default() };
            let mut gates = gates;
            if gates.iter().all(|g| !g) { gates[1] = true; }
            let mut cursor = TreeCursor::new();
            let mut prefix = Vec::new();
            let mut legal = vec![false; lib.len()];
            for c in choices.iter().cycle().take(64) {
                if cursor.is_complete() { break; }
                cursor.structural_mask_into(&lib, &cfg, &mut legal).unwrap();
                prop_assert_eq!(&legal, &oracle_legal(&prefix, &lib, &cfg));
                apply_gate(&mut legal, &lib, &gates).unwrap();
                let options: Vec<usize> = (0..lib.len()).filter(|&i| legal[i]).collect();
                let pick = TokenId(options[*c as usize % options.len()] as u8);
                cursor.push(pick, &lib);
                prefix.push(pick);
            }
            prop_assert!(cursor.is_complete());
            prop_assert!(prefix.len() >= cfg.min_length && prefix.len() <= cfg.max_length);
        }
    }
}
