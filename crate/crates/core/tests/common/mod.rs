#![allow(dead_code)]

pub mod bd_oracle;
pub mod entropy_cases;
pub mod golden;
pub mod grad_ops;
pub mod structure_cases;
