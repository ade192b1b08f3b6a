//! Belief-propagation and differential-attention transformer decoders for
//! binary linear codes over the BPSK/AWGN channel.

pub mod autodiff;
pub mod bp;
pub mod channel;
pub mod gf2codes;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod seeding;
pub mod tanner;
pub mod train;
