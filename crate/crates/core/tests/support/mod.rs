#![allow(dead_code)]

pub mod meta_fd;
pub mod oracles;
pub mod pcg_checks;
