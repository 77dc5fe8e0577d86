//! Width-based model construction toolkit.
//!
//! The crate is organized around one semantic carrier, [`model::Instance`]
//! (a finite set of atoms over constants and nulls), and several syntaxes
//! that denote instances or transform them:
//!
//! * [`model`] — instances, homomorphism search, cores, two-way regular
//!   path expressions, and naive first-order evaluation. Everything here is
//!   a direct, brute-force implementation: these functions are the oracles
//!   the rest of the crate is validated against.
//! * [`queries`] — conjunctive queries, unions thereof, and monadic
//!   disjunctive datalog queries, with parsers and finite-instance
//!   evaluation.
//! * [`pwtree`] — decorated binary trees whose nodes carry tuple-coloring
//!   instructions; finite or regular (cyclic) trees evaluate to instances
//!   together with per-node color maps. Includes validation, streak
//!   splicing, and normal forms.
//! * [`transforms`] — width-preserving tree rewrites that realize defined
//!   relations (equality, products, permutations, complements, unions,
//!   projections, full first-order compilation, and two-way regular path
//!   closures) directly on decorated trees.
//! * [`cwalgebra`] — the unary-color assembly algebra (cliquewidth style),
//!   its evaluator, and the translation from binary-signature decorated
//!   trees into assembly expressions.
//! * [`chase`] — existential rules, the Skolem chase, rule dependencies and
//!   layered evaluation, query rewriting, Turing-machine rule generators,
//!   and a budgeted entailment harness combining chase and countermodel
//!   search.

pub mod chase;
pub mod cwalgebra;
pub mod model;
pub mod pwtree;
pub mod queries;
pub mod transforms;
