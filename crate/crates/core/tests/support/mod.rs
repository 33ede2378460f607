pub mod corpora;
pub mod oracles;
pub mod roundtrip;
