#![no_main]

use cotrain::banks::{detokenize_actions, tokenize_actions};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if data.len() < 3 {
        return;
    }
    let vocab = usize::from(data[0]);
    let dof = usize::from(data[1] % 16);
    let horizon = usize::from(data[2] % 16);
    let tokens: Vec<usize> = data[3..].iter().map(|&b| usize::from(b)).collect();
    if let Ok(actions) = detokenize_actions(&tokens, vocab, dof, horizon) {
        assert_eq!(actions.len(), dof * horizon);
        assert!(actions.iter().all(|a| (-1.0..=1.0).contains(a)));
        assert_eq!(tokenize_actions(&actions, vocab).expect("centers tokenize"), tokens);
    }
});
