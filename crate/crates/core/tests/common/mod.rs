#![allow(dead_code)]

pub mod kf_oracle;
pub mod qp_oracle;
