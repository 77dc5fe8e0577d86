//! Relational instances over constants and nulls, with the brute-force
//! semantic machinery used as ground truth throughout the crate:
//! homomorphism search, isomorphism checking, cores, tuple shuffling,
//! two-way regular path expressions, and naive first-order evaluation.

use itertools::Itertools;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

/// The universal unary predicate present in every signature.
pub const TOP: &str = "Top";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn precondition(msg: impl Into<String>) -> ModelError {
    ModelError::Precondition(msg.into())
}

// ---------------------------------------------------------------------------
// Terms, atoms, signatures, instances
// ---------------------------------------------------------------------------

/// A constant or a null. Null names are rendered with a leading underscore,
/// constants as bare identifiers; the two name spaces are disjoint.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Constant(String),
    Null(String),
}

impl Term {
    pub fn constant(name: impl Into<String>) -> Term {
        Term::Constant(name.into())
    }

    pub fn null(name: impl Into<String>) -> Term {
        Term::Null(name.into())
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Term::Constant(_))
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Term::Null(_))
    }

    pub fn name(&self) -> &str {
        match self {
            Term::Constant(n) | Term::Null(n) => n,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Constant(n) => write!(f, "{n}"),
            Term::Null(n) => write!(f, "_{n}"),
        }
    }
}

/// Parses a serialized term: a leading underscore marks a null.
pub fn parse_term(tok: &str) -> Result<Term> {
    if let Some(rest) = tok.strip_prefix('_') {
        if rest.is_empty() {
            return Err(precondition("null name must not be empty"));
        }
        Ok(Term::Null(rest.to_string()))
    } else if tok.is_empty() {
        Err(precondition("empty term"))
    } else {
        Ok(Term::Constant(tok.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Predicate {
    pub name: String,
    pub arity: usize,
}

impl Predicate {
    pub fn new(name: impl Into<String>, arity: usize) -> Predicate {
        let name = name.into();
        assert!(arity >= 1, "predicate {name} must have positive arity");
        Predicate { name, arity }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Atom {
    pub predicate: String,
    pub args: Vec<Term>,
}

impl Atom {
    pub fn new(predicate: impl Into<String>, args: Vec<Term>) -> Atom {
        Atom {
            predicate: predicate.into(),
            args,
        }
    }

    pub fn arity(&self) -> usize {
        self.args.len()
    }

    /// Applies a substitution; unmapped constants stay fixed, unmapped nulls
    /// are left in place.
    pub fn apply(&self, sub: &Substitution) -> Atom {
        Atom {
            predicate: self.predicate.clone(),
            args: self.args.iter().map(|t| sub.apply(t)).collect(),
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.predicate, self.args.iter().join(","))
    }
}

/// Predicate arities plus the known constants. `Top/1` is always present.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Signature {
    arities: BTreeMap<String, usize>,
    pub constants: BTreeSet<String>,
}

impl Signature {
    pub fn new() -> Signature {
        let mut arities = BTreeMap::new();
        arities.insert(TOP.to_string(), 1);
        Signature {
            arities,
            constants: BTreeSet::new(),
        }
    }

    pub fn with_predicates(preds: impl IntoIterator<Item = Predicate>) -> Signature {
        let mut sig = Signature::new();
        for p in preds {
            sig.add(p);
        }
        sig
    }

    pub fn add(&mut self, p: Predicate) {
        if let Some(&prev) = self.arities.get(&p.name) {
            assert_eq!(
                prev, p.arity,
                "predicate {} declared with arities {} and {}",
                p.name, prev, p.arity
            );
        }
        self.arities.insert(p.name, p.arity);
    }

    pub fn arity(&self, name: &str) -> Option<usize> {
        self.arities.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arities.contains_key(name)
    }

    pub fn predicates(&self) -> impl Iterator<Item = Predicate> + '_ {
        self.arities
            .iter()
            .map(|(n, &a)| Predicate::new(n.clone(), a))
    }

    pub fn max_arity(&self) -> usize {
        self.arities.values().copied().max().unwrap_or(1)
    }

    /// Maximum arity over the ordinary predicates, ignoring `Top`.
    pub fn max_arity_proper(&self) -> usize {
        self.arities
            .iter()
            .filter(|(n, _)| n.as_str() != TOP)
            .map(|(_, &a)| a)
            .max()
            .unwrap_or(1)
    }

    pub fn union(&self, other: &Signature) -> Signature {
        let mut out = self.clone();
        for p in other.predicates() {
            out.add(p);
        }
        out.constants.extend(other.constants.iter().cloned());
        out
    }
}

/// A finite set of atoms together with its signature.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Instance {
    pub atoms: BTreeSet<Atom>,
    pub signature: Signature,
}

impl Instance {
    pub fn empty() -> Instance {
        Instance {
            atoms: BTreeSet::new(),
            signature: Signature::new(),
        }
    }

    /// Builds an instance, inferring the signature from the atoms.
    pub fn from_atoms(atoms: impl IntoIterator<Item = Atom>) -> Instance {
        let mut inst = Instance::empty();
        for a in atoms {
            inst.insert(a);
        }
        inst
    }

    pub fn new(atoms: BTreeSet<Atom>, signature: Signature) -> Result<Instance> {
        for a in &atoms {
            match signature.arity(&a.predicate) {
                None => {
                    return Err(precondition(format!(
                        "atom {a} uses a predicate outside the signature"
                    )))
                }
                Some(k) if k != a.arity() => {
                    return Err(precondition(format!(
                        "atom {a} has arity {} but {} is declared with arity {k}",
                        a.arity(),
                        a.predicate
                    )))
                }
                _ => {}
            }
        }
        Ok(Instance { atoms, signature })
    }

    /// Inserts an atom, extending the signature as needed.
    pub fn insert(&mut self, atom: Atom) {
        self.signature
            .add(Predicate::new(atom.predicate.clone(), atom.arity()));
        for t in &atom.args {
            if let Term::Constant(c) = t {
                self.signature.constants.insert(c.clone());
            }
        }
        self.atoms.insert(atom);
    }

    /// The active domain: every term occurring in some atom.
    pub fn adom(&self) -> BTreeSet<Term> {
        self.atoms
            .iter()
            .flat_map(|a| a.args.iter().cloned())
            .collect()
    }

    pub fn atoms_of(&self, predicate: &str) -> impl Iterator<Item = &Atom> {
        self.atoms.iter().filter(move |a| a.predicate == predicate)
    }

    /// Restricts to the atoms whose predicate satisfies `keep`.
    pub fn restrict_predicates(&self, keep: impl Fn(&str) -> bool) -> Instance {
        let atoms = self
            .atoms
            .iter()
            .filter(|a| keep(&a.predicate))
            .cloned()
            .collect();
        Instance {
            atoms,
            signature: self.signature.clone(),
        }
    }

    pub fn union(&self, other: &Instance) -> Instance {
        Instance {
            atoms: self.atoms.union(&other.atoms).cloned().collect(),
            signature: self.signature.union(&other.signature),
        }
    }

    pub fn apply(&self, sub: &Substitution) -> Instance {
        let mut out = Instance::empty();
        out.signature = self.signature.clone();
        for a in &self.atoms {
            out.atoms.insert(a.apply(sub));
        }
        out
    }

    pub fn is_subset_of(&self, other: &Instance) -> bool {
        self.atoms.is_subset(&other.atoms)
    }

    /// Canonical serialization: sorted atoms, one per line, dot-terminated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let declared: Vec<String> = self
            .signature
            .predicates()
            .filter(|p| p.name != TOP && !self.atoms.iter().any(|a| a.predicate == p.name))
            .map(|p| format!("{}/{}", p.name, p.arity))
            .collect();
        if !declared.is_empty() {
            out.push_str(&format!("@sig {}\n", declared.join(" ")));
        }
        for a in &self.atoms {
            out.push_str(&format!("{a}.\n"));
        }
        out
    }
}

impl fmt::Display for Instance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_text())
    }
}

/// Parses the instance text format: one `Pred(t1,...,tn).` atom per line,
/// `#` comments, optional `@sig Pred/arity ...` declarations.
pub fn parse_instance(input: &str) -> Result<Instance> {
    let mut inst = Instance::empty();
    for (idx, raw) in input.lines().enumerate() {
        let line = raw.trim();
        let lineno = idx + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("@sig") {
            for decl in rest.split_whitespace() {
                let (name, arity) = decl.split_once('/').ok_or(ModelError::Parse {
                    line: lineno,
                    msg: format!("signature entry `{decl}` is not of the form Name/arity"),
                })?;
                let arity: usize = arity.parse().map_err(|_| ModelError::Parse {
                    line: lineno,
                    msg: format!("bad arity in `{decl}`"),
                })?;
                if arity == 0 {
                    return Err(ModelError::Parse {
                        line: lineno,
                        msg: format!("predicate {name} must have positive arity"),
                    });
                }
                inst.signature.add(Predicate::new(name, arity));
            }
            continue;
        }
        let atom = parse_atom(line).map_err(|msg| ModelError::Parse { line: lineno, msg })?;
        if let Some(declared) = inst.signature.arity(&atom.predicate) {
            if declared != atom.arity() {
                return Err(ModelError::Parse {
                    line: lineno,
                    msg: format!(
                        "atom {atom} has arity {} but {} is declared with arity {declared}",
                        atom.arity(),
                        atom.predicate
                    ),
                });
            }
        }
        inst.insert(atom);
    }
    Ok(inst)
}

fn parse_atom(line: &str) -> std::result::Result<Atom, String> {
    let line = line.trim().trim_end_matches('.').trim();
    let open = line
        .find('(')
        .ok_or_else(|| format!("expected `Pred(...)`, got `{line}`"))?;
    if !line.ends_with(')') {
        return Err(format!("missing closing parenthesis in `{line}`"));
    }
    let name = line[..open].trim();
    if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
        return Err(format!("bad predicate name `{name}`"));
    }
    let inner = &line[open + 1..line.len() - 1];
    let mut args = Vec::new();
    for tok in inner.split(',') {
        let tok = tok.trim();
        args.push(parse_term(tok).map_err(|e| e.to_string())?);
    }
    if args.is_empty() {
        return Err(format!("atom `{line}` has no arguments"));
    }
    Ok(Atom::new(name, args))
}

// ---------------------------------------------------------------------------
// Substitutions and homomorphisms
// ---------------------------------------------------------------------------

/// A partial map on terms. Constants outside the map are fixed pointwise;
/// when used as a homomorphism the map never moves a constant.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Substitution {
    map: BTreeMap<Term, Term>,
}

impl Substitution {
    pub fn new() -> Substitution {
        Substitution::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Term, Term)>) -> Substitution {
        Substitution {
            map: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, t: &Term) -> Option<&Term> {
        self.map.get(t)
    }

    pub fn bind(&mut self, from: Term, to: Term) {
        self.map.insert(from, to);
    }

    pub fn apply(&self, t: &Term) -> Term {
        match self.map.get(t) {
            Some(u) => u.clone(),
            None => t.clone(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Term, &Term)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// True when every constant in the domain maps to itself.
    pub fn fixes_constants(&self) -> bool {
        self.map
            .iter()
            .all(|(k, v)| !k.is_constant() || k == v)
    }

    /// The image of the map restricted to its explicit domain.
    pub fn image(&self) -> BTreeSet<Term> {
        self.map.values().cloned().collect()
    }
}

/// Whether to stop after the first homomorphism or enumerate all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    First,
    All,
}

/// Backtracking homomorphism search from a set of atoms into an instance.
///
/// Nulls of `src` act as variables; constants are fixed pointwise. The
/// search picks the most constrained unmatched atom first (fewest candidate
/// target atoms under the current partial substitution) with lexical order
/// breaking ties, which keeps the branching factor small on the query-like
/// inputs this crate produces.
pub fn find_homomorphisms(
    src: &BTreeSet<Atom>,
    dst: &Instance,
    seed: &Substitution,
    mode: SearchMode,
) -> Vec<Substitution> {
    let mut results = Vec::new();
    if !seed.fixes_constants() {
        return results;
    }
    let atoms: Vec<&Atom> = src.iter().collect();
    let mut sub = seed.clone();
    let mut done = vec![false; atoms.len()];
    search_homs(&atoms, &mut done, dst, &mut sub, mode, &mut |s| {
        results.push(s.clone());
        mode == SearchMode::First
    });
    results
}

/// Like [`find_homomorphisms`] but streaming: `visit` returns `true` to stop.
pub fn visit_homomorphisms(
    src: &BTreeSet<Atom>,
    dst: &Instance,
    seed: &Substitution,
    visit: &mut dyn FnMut(&Substitution) -> bool,
) {
    if !seed.fixes_constants() {
        return;
    }
    let atoms: Vec<&Atom> = src.iter().collect();
    let mut sub = seed.clone();
    let mut done = vec![false; atoms.len()];
    search_homs(&atoms, &mut done, dst, &mut sub, SearchMode::All, visit);
}

fn search_homs(
    atoms: &[&Atom],
    done: &mut [bool],
    dst: &Instance,
    sub: &mut Substitution,
    mode: SearchMode,
    emit: &mut dyn FnMut(&Substitution) -> bool,
) -> bool {
    // Pick the unmatched atom with the fewest candidates; atoms are already
    // in lexical order, so the first minimum wins ties.
    let mut best: Option<(usize, Vec<&Atom>)> = None;
    for (i, atom) in atoms.iter().enumerate() {
        if done[i] {
            continue;
        }
        let cands: Vec<&Atom> = dst
            .atoms_of(&atom.predicate)
            .filter(|cand| compatible(atom, cand, sub))
            .collect();
        let better = match &best {
            None => true,
            Some((_, prev)) => cands.len() < prev.len(),
        };
        if better {
            let empty = cands.is_empty();
            best = Some((i, cands));
            if empty {
                break;
            }
        }
    }
    let Some((i, cands)) = best else {
        return emit(sub);
    };
    done[i] = true;
    for cand in cands {
        let mut added = Vec::new();
        if unify(atoms[i], cand, sub, &mut added) {
            let stop = search_homs(atoms, done, dst, sub, mode, emit);
            for t in &added {
                sub.map.remove(t);
            }
            if stop {
                done[i] = false;
                return true;
            }
        } else {
            for t in &added {
                sub.map.remove(t);
            }
        }
    }
    done[i] = false;
    false
}

fn compatible(pattern: &Atom, target: &Atom, sub: &Substitution) -> bool {
    if pattern.args.len() != target.args.len() {
        return false;
    }
    let mut local: BTreeMap<&Term, &Term> = BTreeMap::new();
    for (p, t) in pattern.args.iter().zip(&target.args) {
        match p {
            Term::Constant(_) => {
                if p != t {
                    return false;
                }
            }
            Term::Null(_) => {
                if let Some(bound) = sub.get(p) {
                    if bound != t {
                        return false;
                    }
                } else if let Some(prev) = local.get(p) {
                    if *prev != t {
                        return false;
                    }
                } else {
                    local.insert(p, t);
                }
            }
        }
    }
    true
}

fn unify(pattern: &Atom, target: &Atom, sub: &mut Substitution, added: &mut Vec<Term>) -> bool {
    for (p, t) in pattern.args.iter().zip(&target.args) {
        match p {
            Term::Constant(_) => {
                if p != t {
                    return false;
                }
            }
            Term::Null(_) => match sub.get(p) {
                Some(bound) => {
                    if bound != t {
                        return false;
                    }
                }
                None => {
                    sub.bind(p.clone(), t.clone());
                    added.push(p.clone());
                }
            },
        }
    }
    true
}

/// Checks whether `sub` maps every atom of `src` into `dst`.
pub fn is_homomorphism(src: &BTreeSet<Atom>, dst: &Instance, sub: &Substitution) -> bool {
    sub.fixes_constants() && src.iter().all(|a| dst.atoms.contains(&a.apply(sub)))
}

/// Searches for an isomorphism between two finite instances: a bijective,
/// constant-fixing homomorphism whose инverse is also a homomorphism. The
/// witnessing substitution maps the nulls of `i` onto the nulls of `j`.
pub fn is_isomorphic(i: &Instance, j: &Instance) -> Option<Substitution> {
    if i.atoms.len() != j.atoms.len() {
        return None;
    }
    let adom_i = i.adom();
    let adom_j = j.adom();
    if adom_i.len() != adom_j.len() {
        return None;
    }
    // Constants must agree exactly, and per-predicate atom counts must match.
    if adom_i.iter().filter(|t| t.is_constant()).collect::<Vec<_>>()
        != adom_j.iter().filter(|t| t.is_constant()).collect::<Vec<_>>()
    {
        return None;
    }
    let count = |inst: &Instance| -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for a in &inst.atoms {
            *m.entry(a.predicate.clone()).or_insert(0) += 1;
        }
        m
    };
    if count(i) != count(j) {
        return None;
    }
    let mut found: Option<Substitution> = None;
    visit_homomorphisms(&i.atoms, j, &Substitution::new(), &mut |sub| {
        // A homomorphism between equal-sized atom sets that is injective on
        // the active domain maps the atoms bijectively, so its inverse is a
        // homomorphism as well.
        let image: BTreeSet<Term> = adom_i.iter().map(|t| sub.apply(t)).collect();
        if image.len() == adom_i.len() {
            let witness = Substitution::from_pairs(
                adom_i
                    .iter()
                    .filter(|t| t.is_null())
                    .map(|t| (t.clone(), sub.apply(t))),
            );
            found = Some(witness);
            true
        } else {
            false
        }
    });
    found
}

/// Computes the core: repeatedly finds a non-injective endomorphism and
/// restricts the instance to its eventual image, until every endomorphism
/// is an automorphism. Exponential; intended for small active domains.
pub fn core(i: &Instance) -> Instance {
    let mut current = i.clone();
    loop {
        let adom = current.adom();
        if adom.iter().all(|t| t.is_constant()) {
            // Every endomorphism fixes all constants, so it is the identity.
            return current;
        }
        let mut collapse: Option<Substitution> = None;
        visit_homomorphisms(&current.atoms, &current, &Substitution::new(), &mut |sub| {
            let image: BTreeSet<Term> = adom.iter().map(|t| sub.apply(t)).collect();
            if image.len() < adom.len() {
                collapse = Some(sub.clone());
                true
            } else {
                false
            }
        });
        match collapse {
            None => return current,
            Some(h) => {
                // Iterate the endomorphism until its image stabilizes; the
                // result is a sub-instance with a strictly smaller domain.
                let mut next = current.clone();
                for _ in 0..=adom.len() {
                    let stepped = next.apply(&h);
                    if stepped == next {
                        break;
                    }
                    next = stepped;
                }
                current = next;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tuple shuffling
// ---------------------------------------------------------------------------

/// The I-shuffling of two tuples: position `i` of the result takes the next
/// entry of `a` when `i ∈ I` and the next entry of `b` otherwise.
///
/// `I` uses 1-based positions, must have exactly `|a|` elements, and must be
/// a strict subset of `{1, ..., |a|+|b|}`.
pub fn shuffle(a: &[Term], b: &[Term], i_set: &BTreeSet<usize>) -> Result<Vec<Term>> {
    let n = a.len() + b.len();
    if i_set.len() != a.len() {
        return Err(precondition(format!(
            "|I| = {} but the first tuple has length {}",
            i_set.len(),
            a.len()
        )));
    }
    if i_set.iter().any(|&p| p == 0 || p > n) {
        return Err(precondition(format!(
            "I contains a position outside 1..={n}"
        )));
    }
    if i_set.len() == n {
        return Err(precondition(
            "I must be a strict subset of the position range".to_string(),
        ));
    }
    let mut out = Vec::with_capacity(n);
    let mut from_a = 0;
    let mut from_b = 0;
    for pos in 1..=n {
        if i_set.contains(&pos) {
            out.push(a[from_a].clone());
            from_a += 1;
        } else {
            out.push(b[from_b].clone());
            from_b += 1;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Instance-level extensions
// ---------------------------------------------------------------------------

/// Replaces the extension of a unary predicate wholesale.
pub fn unary_replace(i: &Instance, u: &str, terms: &BTreeSet<Term>) -> Result<Instance> {
    let adom = i.adom();
    if let Some(t) = terms.iter().find(|t| !adom.contains(*t)) {
        return Err(precondition(format!(
            "replacement term {t} is outside the active domain"
        )));
    }
    if i.signature.arity(u) != Some(1) {
        return Err(precondition(format!("{u} is not a unary predicate of the signature")));
    }
    let mut out = i.restrict_predicates(|p| p != u);
    for t in terms {
        out.insert(Atom::new(u, vec![t.clone()]));
    }
    out.signature = i.signature.clone();
    Ok(out)
}

/// Two-way regular path expressions over binary predicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rpe {
    Forward(String),
    Backward(String),
    Concat(Box<Rpe>, Box<Rpe>),
    Union(Box<Rpe>, Box<Rpe>),
    Star(Box<Rpe>),
}

impl fmt::Display for Rpe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rpe::Forward(p) => write!(f, "{p}>"),
            Rpe::Backward(p) => write!(f, "{p}<"),
            Rpe::Concat(a, b) => write!(f, "({a} {b})"),
            Rpe::Union(a, b) => write!(f, "({a} | {b})"),
            Rpe::Star(e) => write!(f, "{e}*"),
        }
    }
}

pub type TermPairs = BTreeSet<(Term, Term)>;

/// Evaluates a path expression to its binary relation over the instance.
/// Star is the reflexive-transitive closure, with reflexive pairs over the
/// whole active domain.
pub fn rpe_eval(e: &Rpe, i: &Instance) -> TermPairs {
    match e {
        Rpe::Forward(p) => i
            .atoms_of(p)
            .filter(|a| a.arity() == 2)
            .map(|a| (a.args[0].clone(), a.args[1].clone()))
            .collect(),
        Rpe::Backward(p) => i
            .atoms_of(p)
            .filter(|a| a.arity() == 2)
            .map(|a| (a.args[1].clone(), a.args[0].clone()))
            .collect(),
        Rpe::Concat(a, b) => compose(&rpe_eval(a, i), &rpe_eval(b, i)),
        Rpe::Union(a, b) => rpe_eval(a, i).union(&rpe_eval(b, i)).cloned().collect(),
        Rpe::Star(e) => {
            let base = rpe_eval(e, i);
            let mut closure: TermPairs = i.adom().into_iter().map(|t| (t.clone(), t)).collect();
            closure.extend(base.iter().cloned());
            loop {
                let next: TermPairs = closure
                    .union(&compose(&closure, &base))
                    .cloned()
                    .collect();
                if next.len() == closure.len() {
                    return closure;
                }
                closure = next;
            }
        }
    }
}

fn compose(a: &TermPairs, b: &TermPairs) -> TermPairs {
    let mut by_left: BTreeMap<&Term, Vec<&Term>> = BTreeMap::new();
    for (l, r) in b {
        by_left.entry(l).or_default().push(r);
    }
    let mut out = TermPairs::new();
    for (l, m) in a {
        if let Some(rs) = by_left.get(m) {
            for r in rs {
                out.insert((l.clone(), (*r).clone()));
            }
        }
    }
    out
}

/// Adds `P(t,t')` for every pair in the evaluation of the path expression.
pub fn rpe_extend(i: &Instance, p: &str, e: &Rpe) -> Result<Instance> {
    match i.signature.arity(p) {
        Some(2) => {}
        Some(k) => {
            return Err(precondition(format!(
                "{p} has arity {k}; path extensions require a binary predicate"
            )))
        }
        None => {}
    }
    let mut out = i.clone();
    for (a, b) in rpe_eval(e, i) {
        out.insert(Atom::new(p, vec![a, b]));
    }
    Ok(out)
}

/// Parses the path-expression syntax: `P>` and `P<` are forward/backward
/// steps, juxtaposition concatenates, `|` is union (lowest precedence),
/// postfix `*` is closure, parentheses group.
pub fn parse_rpe(input: &str) -> Result<Rpe> {
    let tokens = rpe_tokens(input)?;
    let mut pos = 0;
    let e = rpe_alt(&tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(precondition(format!(
            "trailing input in path expression at token {pos}"
        )));
    }
    Ok(e)
}

#[derive(Debug, Clone, PartialEq)]
enum RpeTok {
    Step(String, bool),
    Open,
    Close,
    Star,
    Pipe,
}

fn rpe_tokens(input: &str) -> Result<Vec<RpeTok>> {
    let mut out = Vec::new();
    let chars: Vec<char> = input.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' | '\n' => i += 1,
            '(' => {
                out.push(RpeTok::Open);
                i += 1;
            }
            ')' => {
                out.push(RpeTok::Close);
                i += 1;
            }
            '*' => {
                out.push(RpeTok::Star);
                i += 1;
            }
            '|' => {
                out.push(RpeTok::Pipe);
                i += 1;
            }
            c if c.is_alphanumeric() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let name: String = chars[start..i].iter().collect();
                match chars.get(i) {
                    Some('>') => {
                        out.push(RpeTok::Step(name, true));
                        i += 1;
                    }
                    Some('<') => {
                        out.push(RpeTok::Step(name, false));
                        i += 1;
                    }
                    _ => {
                        return Err(precondition(format!(
                            "step `{name}` must be followed by `>` or `<`"
                        )))
                    }
                }
            }
            other => return Err(precondition(format!("unexpected character `{other}`"))),
        }
    }
    Ok(out)
}

fn rpe_alt(toks: &[RpeTok], pos: &mut usize) -> Result<Rpe> {
    let mut left = rpe_seq(toks, pos)?;
    while toks.get(*pos) == Some(&RpeTok::Pipe) {
        *pos += 1;
        let right = rpe_seq(toks, pos)?;
        left = Rpe::Union(Box::new(left), Box::new(right));
    }
    Ok(left)
}

fn rpe_seq(toks: &[RpeTok], pos: &mut usize) -> Result<Rpe> {
    let mut parts = Vec::new();
    while matches!(toks.get(*pos), Some(RpeTok::Step(..)) | Some(RpeTok::Open)) {
        parts.push(rpe_postfix(toks, pos)?);
    }
    let mut iter = parts.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| precondition("empty path expression".to_string()))?;
    Ok(iter.fold(first, |acc, e| Rpe::Concat(Box::new(acc), Box::new(e))))
}

fn rpe_postfix(toks: &[RpeTok], pos: &mut usize) -> Result<Rpe> {
    let mut e = match toks.get(*pos) {
        Some(RpeTok::Step(name, fwd)) => {
            *pos += 1;
            if *fwd {
                Rpe::Forward(name.clone())
            } else {
                Rpe::Backward(name.clone())
            }
        }
        Some(RpeTok::Open) => {
            *pos += 1;
            let inner = rpe_alt(toks, pos)?;
            if toks.get(*pos) != Some(&RpeTok::Close) {
                return Err(precondition("unbalanced parenthesis".to_string()));
            }
            *pos += 1;
            inner
        }
        other => {
            return Err(precondition(format!(
                "unexpected token {other:?} in path expression"
            )))
        }
    };
    while toks.get(*pos) == Some(&RpeTok::Star) {
        *pos += 1;
        e = Rpe::Star(Box::new(e));
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// First-order formulas and naive evaluation
// ---------------------------------------------------------------------------

/// A term inside a formula: a variable or a constant.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum FoTerm {
    Var(String),
    Const(String),
}

impl fmt::Display for FoTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FoTerm::Var(v) => write!(f, "?{v}"),
            FoTerm::Const(c) => write!(f, "{c}"),
        }
    }
}

/// First-order formulas over a relational signature, with equality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fo {
    Atom(String, Vec<FoTerm>),
    Eq(FoTerm, FoTerm),
    Not(Box<Fo>),
    And(Box<Fo>, Box<Fo>),
    Or(Box<Fo>, Box<Fo>),
    Exists(String, Box<Fo>),
    Forall(String, Box<Fo>),
}

impl Fo {
    pub fn free_vars(&self) -> BTreeSet<String> {
        fn go(f: &Fo, bound: &mut Vec<String>, out: &mut BTreeSet<String>) {
            let term = |t: &FoTerm, bound: &Vec<String>, out: &mut BTreeSet<String>| {
                if let FoTerm::Var(v) = t {
                    if !bound.contains(v) {
                        out.insert(v.clone());
                    }
                }
            };
            match f {
                Fo::Atom(_, args) => args.iter().for_each(|t| term(t, bound, out)),
                Fo::Eq(a, b) => {
                    term(a, bound, out);
                    term(b, bound, out);
                }
                Fo::Not(g) => go(g, bound, out),
                Fo::And(a, b) | Fo::Or(a, b) => {
                    go(a, bound, out);
                    go(b, bound, out);
                }
                Fo::Exists(v, g) | Fo::Forall(v, g) => {
                    bound.push(v.clone());
                    go(g, bound, out);
                    bound.pop();
                }
            }
        }
        let mut out = BTreeSet::new();
        go(self, &mut Vec::new(), &mut out);
        out
    }
}

/// A formula together with an ordering of its free variables, fixing the
/// argument positions of the relation it defines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoFormula {
    pub body: Fo,
    pub free: Vec<String>,
}

impl FoFormula {
    pub fn new(body: Fo, free: Vec<String>) -> Result<FoFormula> {
        let actual = body.free_vars();
        for v in &actual {
            if !free.contains(v) {
                return Err(precondition(format!(
                    "free variable ?{v} is not in the declared tuple"
                )));
            }
        }
        let distinct: BTreeSet<&String> = free.iter().collect();
        if distinct.len() != free.len() {
            return Err(precondition("duplicate variable in the free tuple".to_string()));
        }
        Ok(FoFormula { body, free })
    }

    /// The declared free tuple, closing over possibly unused positions.
    pub fn arity(&self) -> usize {
        self.free.len()
    }
}

pub type Assignment = BTreeMap<String, Term>;

/// Standard first-order satisfaction with quantifiers ranging over the
/// active domain of the instance.
pub fn eval_fo(i: &Instance, phi: &Fo, nu: &Assignment) -> Result<bool> {
    let adom: Vec<Term> = i.adom().into_iter().collect();
    eval_fo_inner(i, phi, nu, &adom)
}

fn fo_term_value(t: &FoTerm, nu: &Assignment) -> Result<Term> {
    match t {
        FoTerm::Const(c) => Ok(Term::Constant(c.clone())),
        FoTerm::Var(v) => nu
            .get(v)
            .cloned()
            .ok_or_else(|| precondition(format!("unbound free variable ?{v}"))),
    }
}

fn eval_fo_inner(i: &Instance, phi: &Fo, nu: &Assignment, adom: &[Term]) -> Result<bool> {
    match phi {
        Fo::Atom(p, args) => {
            let terms = args
                .iter()
                .map(|t| fo_term_value(t, nu))
                .collect::<Result<Vec<_>>>()?;
            Ok(i.atoms.contains(&Atom::new(p.clone(), terms)))
        }
        Fo::Eq(a, b) => Ok(fo_term_value(a, nu)? == fo_term_value(b, nu)?),
        Fo::Not(g) => Ok(!eval_fo_inner(i, g, nu, adom)?),
        Fo::And(a, b) => Ok(eval_fo_inner(i, a, nu, adom)? && eval_fo_inner(i, b, nu, adom)?),
        Fo::Or(a, b) => Ok(eval_fo_inner(i, a, nu, adom)? || eval_fo_inner(i, b, nu, adom)?),
        Fo::Exists(v, g) => {
            for t in adom {
                let mut nu2 = nu.clone();
                nu2.insert(v.clone(), t.clone());
                if eval_fo_inner(i, g, &nu2, adom)? {
                    return Ok(true);
                }
            }
            Ok(false)
        }
        Fo::Forall(v, g) => {
            for t in adom {
                let mut nu2 = nu.clone();
                nu2.insert(v.clone(), t.clone());
                if !eval_fo_inner(i, g, &nu2, adom)? {
                    return Ok(false);
                }
            }
            Ok(true)
        }
    }
}

/// The relation defined by a formula: all active-domain tuples satisfying it.
pub fn defined_relation(i: &Instance, phi: &FoFormula) -> Result<BTreeSet<Vec<Term>>> {
    let adom: Vec<Term> = i.adom().into_iter().collect();
    let mut out = BTreeSet::new();
    let k = phi.free.len();
    for combo in std::iter::repeat(adom.iter())
        .take(k)
        .multi_cartesian_product()
    {
        let nu: Assignment = phi
            .free
            .iter()
            .cloned()
            .zip(combo.iter().map(|t| (*t).clone()))
            .collect();
        if eval_fo_inner(i, &phi.body, &nu, &adom)? {
            out.insert(combo.into_iter().cloned().collect());
        }
    }
    Ok(out)
}

/// Adds `R(t⃗)` for every tuple of the defined relation.
pub fn fo_extend(i: &Instance, r: &str, phi: &FoFormula) -> Result<Instance> {
    if let Some(k) = i.signature.arity(r) {
        if k != phi.arity() {
            return Err(precondition(format!(
                "{r} has arity {k} but the formula defines a {}-ary relation",
                phi.arity()
            )));
        }
    }
    let mut out = i.clone();
    for tuple in defined_relation(i, phi)? {
        out.insert(Atom::new(r, tuple));
    }
    Ok(out)
}

/// Parses formulas: atoms `R(?x,c)`, equality `?x = ?y`, negation `!`,
/// conjunction `&`, disjunction `|`, quantifiers `exists ?x . φ` and
/// `forall ?x . φ` (binding as far right as possible), and parentheses.
pub fn parse_fo(input: &str) -> Result<Fo> {
    let mut p = FoParser {
        chars: input.chars().collect(),
        pos: 0,
    };
    let f = p.or_expr()?;
    p.skip_ws();
    if p.pos != p.chars.len() {
        return Err(precondition(format!(
            "trailing input in formula at offset {}",
            p.pos
        )));
    }
    Ok(f)
}

struct FoParser {
    chars: Vec<char>,
    pos: usize,
}

impl FoParser {
    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> Result<String> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.chars.len()
            && (self.chars[self.pos].is_alphanumeric() || self.chars[self.pos] == '_')
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(precondition(format!(
                "expected identifier at offset {start}"
            )));
        }
        Ok(self.chars[start..self.pos].iter().collect())
    }

    fn or_expr(&mut self) -> Result<Fo> {
        let mut left = self.and_expr()?;
        while self.eat('|') {
            let right = self.and_expr()?;
            left = Fo::Or(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn and_expr(&mut self) -> Result<Fo> {
        let mut left = self.unary_expr()?;
        while self.eat('&') {
            let right = self.unary_expr()?;
            left = Fo::And(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn unary_expr(&mut self) -> Result<Fo> {
        if self.eat('!') {
            return Ok(Fo::Not(Box::new(self.unary_expr()?)));
        }
        if self.eat('(') {
            let inner = self.or_expr()?;
            if !self.eat(')') {
                return Err(precondition("unbalanced parenthesis in formula".to_string()));
            }
            return Ok(inner);
        }
        self.skip_ws();
        let rest: String = self.chars[self.pos..].iter().collect();
        for (kw, forall) in [("exists", false), ("forall", true)] {
            if rest.starts_with(kw)
                && rest[kw.len()..]
                    .chars()
                    .next()
                    .map_or(false, |c| c.is_whitespace() || c == '?')
            {
                self.pos += kw.len();
                if !self.eat('?') {
                    return Err(precondition(format!("{kw} needs a ?variable")));
                }
                let v = self.ident()?;
                if !self.eat('.') {
                    return Err(precondition(format!("{kw} ?{v} needs `.` before its body")));
                }
                let body = self.or_expr()?;
                return Ok(if forall {
                    Fo::Forall(v, Box::new(body))
                } else {
                    Fo::Exists(v, Box::new(body))
                });
            }
        }
        // Atom or equality.
        if self.eat('?') {
            let v = self.ident()?;
            if !self.eat('=') {
                return Err(precondition(format!(
                    "expected `=` after bare variable ?{v}"
                )));
            }
            let rhs = self.fo_term()?;
            return Ok(Fo::Eq(FoTerm::Var(v), rhs));
        }
        let name = self.ident()?;
        if self.eat('(') {
            let mut args = Vec::new();
            loop {
                args.push(self.fo_term()?);
                if self.eat(',') {
                    continue;
                }
                break;
            }
            if !self.eat(')') {
                return Err(precondition(format!("unclosed argument list of {name}")));
            }
            Ok(Fo::Atom(name, args))
        } else if self.eat('=') {
            let rhs = self.fo_term()?;
            Ok(Fo::Eq(FoTerm::Const(name), rhs))
        } else {
            Err(precondition(format!(
                "expected `(` or `=` after identifier {name}"
            )))
        }
    }

    fn fo_term(&mut self) -> Result<FoTerm> {
        if self.eat('?') {
            Ok(FoTerm::Var(self.ident()?))
        } else {
            Ok(FoTerm::Const(self.ident()?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(n: &str) -> Term {
        Term::constant(n)
    }

    fn nl(n: &str) -> Term {
        Term::null(n)
    }

    #[test]
    fn shuffle_interleaves_by_position() {
        let a = vec![c("a1"), c("a2")];
        let b = vec![c("b1"), c("b2"), c("b3")];
        let i: BTreeSet<usize> = [2, 5].into_iter().collect();
        let out = shuffle(&a, &b, &i).unwrap();
        assert_eq!(out, vec![c("b1"), c("a1"), c("b2"), c("b3"), c("a2")]);
    }

    #[test]
    fn shuffle_empty_left() {
        let out = shuffle(&[], &[c("b1")], &BTreeSet::new()).unwrap();
        assert_eq!(out, vec![c("b1")]);
    }

    #[test]
    fn shuffle_rejects_full_position_set() {
        let a = vec![c("a1")];
        let i: BTreeSet<usize> = [1].into_iter().collect();
        assert!(shuffle(&a, &[], &i).is_err());
    }

    #[test]
    fn shuffle_matches_positional_oracle_exhaustively() {
        // Reconstruction oracle: place a-entries at the I positions in
        // order, then fill the gaps with b-entries in order.
        for total in 1..=5usize {
            for alen in 0..=total {
                let blen = total - alen;
                let a: Vec<Term> = (0..alen).map(|k| c(&format!("a{k}"))).collect();
                let b: Vec<Term> = (0..blen).map(|k| c(&format!("b{k}"))).collect();
                for iset in (1..=total).combinations(alen) {
                    let iset: BTreeSet<usize> = iset.into_iter().collect();
                    if iset.len() == total {
                        continue;
                    }
                    let got = shuffle(&a, &b, &iset).unwrap();
                    let mut expect = vec![None; total];
                    for (k, &p) in iset.iter().enumerate() {
                        expect[p - 1] = Some(a[k].clone());
                    }
                    let mut bs = b.iter();
                    for slot in expect.iter_mut() {
                        if slot.is_none() {
                            *slot = Some(bs.next().unwrap().clone());
                        }
                    }
                    let expect: Vec<Term> = expect.into_iter().map(Option::unwrap).collect();
                    assert_eq!(got, expect, "I = {iset:?}");
                }
            }
        }
    }

    #[test]
    fn hom_single_atom() {
        let src: BTreeSet<Atom> =
            [Atom::new("E", vec![nl("x"), nl("y")])].into_iter().collect();
        let dst = Instance::from_atoms([Atom::new("E", vec![c("a"), c("b")])]);
        let homs = find_homomorphisms(&src, &dst, &Substitution::new(), SearchMode::All);
        assert_eq!(homs.len(), 1);
        assert_eq!(homs[0].apply(&nl("x")), c("a"));
        assert_eq!(homs[0].apply(&nl("y")), c("b"));
    }

    #[test]
    fn hom_respects_constants() {
        let src: BTreeSet<Atom> = [Atom::new("E", vec![c("a"), nl("y")])].into_iter().collect();
        let dst = Instance::from_atoms([Atom::new("E", vec![c("b"), c("c")])]);
        assert!(find_homomorphisms(&src, &dst, &Substitution::new(), SearchMode::All).is_empty());
    }

    #[test]
    fn hom_transitivity_body() {
        let src: BTreeSet<Atom> = [
            Atom::new("Ancestor", vec![nl("x"), nl("y")]),
            Atom::new("Ancestor", vec![nl("y"), nl("z")]),
        ]
        .into_iter()
        .collect();
        let dst = Instance::from_atoms([
            Atom::new("Ancestor", vec![c("a"), c("b")]),
            Atom::new("Ancestor", vec![c("b"), c("c")]),
        ]);
        let homs = find_homomorphisms(&src, &dst, &Substitution::new(), SearchMode::All);
        assert_eq!(homs.len(), 1);
        assert_eq!(homs[0].apply(&nl("y")), c("b"));
    }

    #[test]
    fn hom_composition_is_hom() {
        let x = Instance::from_atoms([Atom::new("E", vec![nl("u"), nl("v")])]);
        let y = Instance::from_atoms([
            Atom::new("E", vec![nl("p"), nl("q")]),
            Atom::new("E", vec![nl("q"), nl("p")]),
        ]);
        let z = Instance::from_atoms([Atom::new("E", vec![c("a"), c("a")])]);
        for h in find_homomorphisms(&x.atoms, &y, &Substitution::new(), SearchMode::All) {
            for g in find_homomorphisms(&y.atoms, &z, &Substitution::new(), SearchMode::All) {
                let composed = Substitution::from_pairs(
                    x.adom().into_iter().map(|t| {
                        let mid = h.apply(&t);
                        (t, g.apply(&mid))
                    }),
                );
                assert!(is_homomorphism(&x.atoms, &z, &composed));
            }
        }
    }

    #[test]
    fn iso_null_renaming() {
        let i = Instance::from_atoms([Atom::new("E", vec![nl("1"), nl("2")])]);
        let j = Instance::from_atoms([Atom::new("E", vec![nl("7"), nl("8")])]);
        let w = is_isomorphic(&i, &j).unwrap();
        assert_eq!(w.apply(&nl("1")), nl("7"));
        assert_eq!(w.apply(&nl("2")), nl("8"));
    }

    #[test]
    fn iso_rejects_different_constants() {
        let i = Instance::from_atoms([Atom::new("E", vec![c("a"), nl("1")])]);
        let j = Instance::from_atoms([Atom::new("E", vec![c("b"), nl("1")])]);
        assert!(is_isomorphic(&i, &j).is_none());
    }

    #[test]
    fn iso_identity() {
        let i = Instance::from_atoms([
            Atom::new("E", vec![c("a"), nl("1")]),
            Atom::new("E", vec![nl("1"), c("a")]),
        ]);
        assert!(is_isomorphic(&i, &i).is_some());
    }

    #[test]
    fn iso_distinguishes_chain_from_fork() {
        let chain = Instance::from_atoms([
            Atom::new("E", vec![nl("1"), nl("2")]),
            Atom::new("E", vec![nl("2"), nl("3")]),
        ]);
        let fork = Instance::from_atoms([
            Atom::new("E", vec![nl("1"), nl("2")]),
            Atom::new("E", vec![nl("1"), nl("3")]),
        ]);
        assert!(is_isomorphic(&chain, &fork).is_none());
    }

    #[test]
    fn core_collapses_null_into_constant_loop() {
        let i = Instance::from_atoms([
            Atom::new("E", vec![c("a"), nl("1")]),
            Atom::new("E", vec![c("a"), c("a")]),
        ]);
        let j = core(&i);
        assert_eq!(
            j.atoms,
            Instance::from_atoms([Atom::new("E", vec![c("a"), c("a")])]).atoms
        );
    }

    #[test]
    fn core_of_constant_instance_is_identity() {
        let i = Instance::from_atoms([
            Atom::new("E", vec![c("a"), c("b")]),
            Atom::new("E", vec![c("b"), c("a")]),
        ]);
        assert_eq!(core(&i), i);
    }

    #[test]
    fn core_is_hom_equivalent_and_idempotent() {
        let i = Instance::from_atoms([
            Atom::new("E", vec![nl("1"), nl("2")]),
            Atom::new("E", vec![nl("2"), nl("1")]),
            Atom::new("E", vec![nl("3"), nl("4")]),
            Atom::new("E", vec![nl("4"), nl("3")]),
        ]);
        let j = core(&i);
        assert!(j.atoms.len() == 2);
        assert!(!find_homomorphisms(&i.atoms, &j, &Substitution::new(), SearchMode::First)
            .is_empty());
        assert!(!find_homomorphisms(&j.atoms, &i, &Substitution::new(), SearchMode::First)
            .is_empty());
        assert!(is_isomorphic(&core(&j), &j).is_some());
    }

    #[test]
    fn unary_replace_set_algebra() {
        let i = Instance::from_atoms([
            Atom::new("A", vec![c("a")]),
            Atom::new("A", vec![c("b")]),
            Atom::new("E", vec![c("a"), c("b")]),
        ]);
        let t: BTreeSet<Term> = [c("b")].into_iter().collect();
        let j = unary_replace(&i, "A", &t).unwrap();
        assert_eq!(
            j.atoms,
            Instance::from_atoms([
                Atom::new("A", vec![c("b")]),
                Atom::new("E", vec![c("a"), c("b")]),
            ])
            .atoms
        );
        // Replacing with the current extension is the identity.
        let current: BTreeSet<Term> = i
            .atoms_of("A")
            .map(|a| a.args[0].clone())
            .collect();
        assert_eq!(unary_replace(&i, "A", &current).unwrap().atoms, i.atoms);
        // Term outside the active domain is rejected.
        let bad: BTreeSet<Term> = [c("zzz")].into_iter().collect();
        assert!(unary_replace(&i, "A", &bad).is_err());
    }

    #[test]
    fn rpe_steps_and_star() {
        let i = Instance::from_atoms([
            Atom::new("P", vec![c("a"), c("b")]),
            Atom::new("P", vec![c("b"), c("c")]),
        ]);
        let fwd = rpe_eval(&Rpe::Forward("P".into()), &i);
        assert_eq!(fwd, [(c("a"), c("b")), (c("b"), c("c"))].into_iter().collect());
        let bwd = rpe_eval(&Rpe::Backward("P".into()), &i);
        assert_eq!(bwd, [(c("b"), c("a")), (c("c"), c("b"))].into_iter().collect());
        let star = rpe_eval(&Rpe::Star(Box::new(Rpe::Forward("P".into()))), &i);
        let expect: TermPairs = [
            (c("a"), c("a")),
            (c("b"), c("b")),
            (c("c"), c("c")),
            (c("a"), c("b")),
            (c("b"), c("c")),
            (c("a"), c("c")),
        ]
        .into_iter()
        .collect();
        assert_eq!(star, expect);
    }

    #[test]
    fn rpe_star_is_least_fixpoint() {
        let i = Instance::from_atoms([
            Atom::new("P", vec![c("a"), c("b")]),
            Atom::new("P", vec![c("b"), c("a")]),
            Atom::new("Q", vec![c("z"), c("z")]),
        ]);
        let e = Rpe::Forward("P".into());
        let star = rpe_eval(&Rpe::Star(Box::new(e.clone())), &i);
        let base = rpe_eval(&e, &i);
        // Contains reflexivity and the base, closed under composition.
        for t in i.adom() {
            assert!(star.contains(&(t.clone(), t)));
        }
        assert!(base.is_subset(&star));
        for (x, y) in &star {
            for (y2, z) in &base {
                if y == y2 {
                    assert!(star.contains(&(x.clone(), z.clone())));
                }
            }
        }
        // Least: every pair is reflexive or a composition chain.
        let mut reach: TermPairs = i.adom().into_iter().map(|t| (t.clone(), t)).collect();
        loop {
            let next: TermPairs = reach
                .union(&compose(&reach, &base))
                .cloned()
                .collect();
            if next == reach {
                break;
            }
            reach = next;
        }
        assert_eq!(star, reach);
    }

    #[test]
    fn rpe_extend_transitive_closure_of_chain() {
        let mut i = Instance::from_atoms([
            Atom::new("P", vec![c("a"), c("b")]),
            Atom::new("P", vec![c("b"), c("c")]),
            Atom::new("P", vec![c("c"), c("d")]),
        ]);
        i.signature.add(Predicate::new("P", 2));
        // P := P ∪ (P> (P>)*) — the transitive (not reflexive) closure.
        let e = Rpe::Concat(
            Box::new(Rpe::Forward("P".into())),
            Box::new(Rpe::Star(Box::new(Rpe::Forward("P".into())))),
        );
        let j = rpe_extend(&i, "P", &e).unwrap();
        let mut expect = i.clone();
        for (x, y) in [("a", "c"), ("a", "d"), ("b", "d")] {
            expect.insert(Atom::new("P", vec![c(x), c(y)]));
        }
        assert_eq!(j.atoms, expect.atoms);
    }

    #[test]
    fn rpe_extend_composition_example() {
        let i = Instance::from_atoms([
            Atom::new("Friend", vec![c("a"), c("b")]),
            Atom::new("Enemy", vec![c("b"), c("d")]),
            Atom::new("Enemy", vec![c("a"), c("a")]),
        ]);
        let e = Rpe::Concat(
            Box::new(Rpe::Forward("Friend".into())),
            Box::new(Rpe::Forward("Enemy".into())),
        );
        let j = rpe_extend(&i, "Enemy", &e).unwrap();
        let new: Vec<&Atom> = j.atoms.difference(&i.atoms).collect();
        assert_eq!(new, vec![&Atom::new("Enemy", vec![c("a"), c("d")])]);
    }

    #[test]
    fn rpe_parser_roundtrip() {
        let e = parse_rpe("(E> | E<) F>* ").unwrap();
        match e {
            Rpe::Concat(l, r) => {
                assert_eq!(*l, Rpe::Union(
                    Box::new(Rpe::Forward("E".into())),
                    Box::new(Rpe::Backward("E".into()))
                ));
                assert_eq!(*r, Rpe::Star(Box::new(Rpe::Forward("F".into()))));
            }
            other => panic!("unexpected parse: {other:?}"),
        }
        assert!(parse_rpe("E").is_err());
        assert!(parse_rpe("E> |").is_err());
    }

    #[test]
    fn fo_eval_basics() {
        let i = Instance::from_atoms([
            Atom::new("E", vec![c("a"), c("b")]),
            Atom::new(TOP, vec![c("a")]),
            Atom::new(TOP, vec![c("b")]),
        ]);
        let phi = Fo::Atom("E".into(), vec![FoTerm::Var("x".into()), FoTerm::Var("y".into())]);
        let mut nu = Assignment::new();
        nu.insert("x".into(), c("a"));
        nu.insert("y".into(), c("b"));
        assert!(eval_fo(&i, &phi, &nu).unwrap());
        nu.insert("y".into(), c("a"));
        assert!(!eval_fo(&i, &phi, &nu).unwrap());

        let exists_top = Fo::Exists(
            "x".into(),
            Box::new(Fo::Atom(TOP.into(), vec![FoTerm::Var("x".into())])),
        );
        assert!(eval_fo(&i, &exists_top, &Assignment::new()).unwrap());
        assert!(eval_fo(&i, &Fo::Not(Box::new(exists_top)), &Assignment::new())
            .map(|b| !b)
            .unwrap());
    }

    #[test]
    fn fo_eval_rejects_unbound_variable() {
        let i = Instance::from_atoms([Atom::new(TOP, vec![c("a")])]);
        let phi = Fo::Atom(TOP.into(), vec![FoTerm::Var("x".into())]);
        assert!(eval_fo(&i, &phi, &Assignment::new()).is_err());
    }

    #[test]
    fn defined_relation_identity_and_complement() {
        let i = Instance::from_atoms([
            Atom::new("A", vec![c("a")]),
            Atom::new(TOP, vec![c("a")]),
            Atom::new(TOP, vec![c("b")]),
        ]);
        let all = FoFormula::new(
            Fo::Eq(FoTerm::Var("x1".into()), FoTerm::Var("x1".into())),
            vec!["x1".into()],
        )
        .unwrap();
        assert_eq!(defined_relation(&i, &all).unwrap().len(), 2);

        let not_a = FoFormula::new(
            Fo::Not(Box::new(Fo::Atom("A".into(), vec![FoTerm::Var("x1".into())]))),
            vec!["x1".into()],
        )
        .unwrap();
        let rel = defined_relation(&i, &not_a).unwrap();
        assert_eq!(rel, [vec![c("b")]].into_iter().collect());
    }

    #[test]
    fn fo_extend_concept_product() {
        let i = Instance::from_atoms([
            Atom::new("A", vec![c("a1")]),
            Atom::new("A", vec![c("a2")]),
            Atom::new("B", vec![c("b1")]),
            Atom::new("B", vec![c("b2")]),
        ]);
        let phi = FoFormula::new(
            Fo::And(
                Box::new(Fo::Atom("A".into(), vec![FoTerm::Var("x".into())])),
                Box::new(Fo::Atom("B".into(), vec![FoTerm::Var("y".into())])),
            ),
            vec!["x".into(), "y".into()],
        )
        .unwrap();
        let j = fo_extend(&i, "P", &phi).unwrap();
        assert_eq!(j.atoms.len(), i.atoms.len() + 4);
        assert!(j.atoms.contains(&Atom::new("P", vec![c("a1"), c("b2")])));
    }

    #[test]
    fn fo_extend_false_is_identity() {
        let i = Instance::from_atoms([Atom::new(TOP, vec![c("a")])]);
        let phi = FoFormula::new(
            Fo::Not(Box::new(Fo::Eq(
                FoTerm::Var("x".into()),
                FoTerm::Var("x".into()),
            ))),
            vec!["x".into()],
        )
        .unwrap();
        let j = fo_extend(&i, "R", &phi).unwrap();
        assert_eq!(j.atoms, i.atoms);
    }

    #[test]
    fn fo_eval_respects_isomorphism() {
        let i = Instance::from_atoms([
            Atom::new("E", vec![nl("1"), nl("2")]),
            Atom::new("A", vec![nl("1")]),
        ]);
        let j = Instance::from_atoms([
            Atom::new("E", vec![nl("x"), nl("y")]),
            Atom::new("A", vec![nl("x")]),
        ]);
        let sigma = is_isomorphic(&i, &j).unwrap();
        let phi = Fo::Exists(
            "u".into(),
            Box::new(Fo::And(
                Box::new(Fo::Atom("A".into(), vec![FoTerm::Var("u".into())])),
                Box::new(Fo::Exists(
                    "v".into(),
                    Box::new(Fo::Atom(
                        "E".into(),
                        vec![FoTerm::Var("u".into()), FoTerm::Var("v".into())],
                    )),
                )),
            )),
        );
        assert_eq!(
            eval_fo(&i, &phi, &Assignment::new()).unwrap(),
            eval_fo(&j, &phi, &Assignment::new()).unwrap()
        );
        let _ = sigma;
    }

    #[test]
    fn instance_text_roundtrip() {
        let text = "# fixture\n@sig Unused/3\nE(a,_n1).\nTop(a).\n";
        let i = parse_instance(text).unwrap();
        assert_eq!(i.atoms.len(), 2);
        assert_eq!(i.signature.arity("Unused"), Some(3));
        assert!(i.atoms.contains(&Atom::new("E", vec![c("a"), nl("n1")])));
        let j = parse_instance(&i.to_text()).unwrap();
        assert_eq!(i.atoms, j.atoms);
        assert_eq!(i.signature.arity("Unused"), j.signature.arity("Unused"));
    }

    #[test]
    fn instance_text_rejects_arity_conflicts() {
        assert!(parse_instance("E(a,b).\nE(a).\n").is_err());
        assert!(parse_instance("@sig E/2\nE(a).\n").is_err());
        assert!(parse_instance("E(a,").is_err());
    }

    #[test]
    fn fo_parser_shapes() {
        let f = parse_fo("exists ?x . A(?x) & !B(?x, c) | ?y = ?x").unwrap();
        match f {
            Fo::Exists(v, body) => {
                assert_eq!(v, "x");
                assert!(matches!(*body, Fo::Or(_, _)));
            }
            other => panic!("unexpected parse {other:?}"),
        }
        assert!(parse_fo("A(?x) &").is_err());
        let eq = parse_fo("?x = a").unwrap();
        assert_eq!(eq, Fo::Eq(FoTerm::Var("x".into()), FoTerm::Const("a".into())));
    }
}
