#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod det;
pub mod error;
pub mod kkt;
pub mod merit;
pub mod nlp;
pub mod oracle;
pub mod selfcheck;
pub mod sto;
pub mod stopping;
