//! Scalar loss values tagged with the term they measure.

use core::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LossTerm {
    Teacher,
    Reconstruction,
    Clustering,
    Gnn,
    Student(usize),
    Total,
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossTerm::Teacher => f.write_str("l_teacher"),
            LossTerm::Reconstruction => f.write_str("l_ae"),
            LossTerm::Clustering => f.write_str("l_clu"),
            LossTerm::Gnn => f.write_str("l_gnn"),
            LossTerm::Student(k) => write!(f, "l_student_{k}"),
            LossTerm::Total => f.write_str("l_total"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarLoss {
    pub value: f64,
    pub term: LossTerm,
}

impl ScalarLoss {
    pub fn new(term: LossTerm, value: f64) -> Self {
        Self { value, term }
    }
}
