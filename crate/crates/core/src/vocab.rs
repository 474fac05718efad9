//! Fixed symbolic vocabulary shared by every task.
//!
//! Layout: three reserved tokens, one prompt-prefix token per task kind, then
//! 17 number symbols (residues mod 17) and 16 sequence symbols. 40 tokens total.

pub type Token = usize;

pub const PAD: Token = 0;
pub const EOS: Token = 1;
pub const SEP: Token = 2;

pub const TASK_MODADD: Token = 3;
pub const TASK_COPY: Token = 4;
pub const TASK_REVERSE: Token = 5;
pub const TASK_MODSUB: Token = 6;

pub const NUMBER_BASE: Token = 7;
pub const NUMBER_COUNT: usize = 17;
pub const SEQ_BASE: Token = NUMBER_BASE + NUMBER_COUNT;
pub const SEQ_COUNT: usize = 16;

pub const VOCAB_SIZE: usize = SEQ_BASE + SEQ_COUNT;

pub fn number(n: usize) -> Token {
    assert!(n < NUMBER_COUNT, "number symbol {n} out of range");
    NUMBER_BASE + n
}

pub fn seq_symbol(i: usize) -> Token {
    assert!(i < SEQ_COUNT, "sequence symbol {i} out of range");
    SEQ_BASE + i
}

pub fn is_reserved(t: Token) -> bool {
    t == PAD || t == EOS || t == SEP
}
