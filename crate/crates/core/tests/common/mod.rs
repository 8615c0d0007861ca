#![allow(dead_code)]

pub mod blobs;
pub mod gradcheck;
pub mod oracles;
pub mod quantref;
