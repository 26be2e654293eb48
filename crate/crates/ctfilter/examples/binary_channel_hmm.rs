//! Exact filtering for a two-state chain seen through a noisy channel.
//!
//! Runs the discrete forward filter on one simulated symbol stream, then
//! re-derives a short stretch of the posterior by brute force — summing the
//! joint probability over every state path — to show the recursion is
//! exact, not approximate.
//!
//! ```text
//! cargo run --release --example binary_channel_hmm
//! ```

use ctfilter::error::Result;
use ctfilter::exact::{hmm_filter_step, DiscreteBelief, DiscreteHMMModel};

fn main() -> Result<()> {
    // Stays put with probability 0.9; the channel flips the emitted bit
    // with probability 0.2.
    let model = DiscreteHMMModel::binary(0.9, 0.2)?;
    let (states, symbols) = model.simulate(64, 7);

    let mut belief = DiscreteBelief::new(model.initial().clone())?;
    let mut correct = 0;
    println!(" k  symbol  P(state 1)  truth");
    for (k, &symbol) in symbols.iter().enumerate() {
        belief = hmm_filter_step(&model, &belief, symbol)?;
        // symbols[k] was emitted by states[k + 1].
        let truth = states[k + 1];
        correct += usize::from(belief.map_state() == truth);
        if k < 8 || k >= symbols.len() - 2 {
            println!("{k:>2}  {symbol:>6}  {:>10.6}  {truth:>5}", belief.prob(1));
        } else if k == 8 {
            println!("  ⋮");
        }
    }
    println!(
        "MAP accuracy over {} steps: {:.3}",
        symbols.len(),
        correct as f64 / symbols.len() as f64
    );

    // Brute-force cross-check on the first 8 symbols: enumerate all 2⁹
    // state paths (x₀..x₈), accumulate P(path, symbols), and marginalize
    // onto x₈.
    let n = 8;
    let p = model.transition();
    let e = model.emission();
    let mut joint = [0.0_f64; 2];
    for assignment in 0..(1u32 << (n + 1)) {
        let state = |k: usize| ((assignment >> k) & 1) as usize;
        let mut prob = model.initial()[state(0)];
        for k in 0..n {
            prob *= p[(state(k), state(k + 1))] * e[(state(k + 1), symbols[k])];
        }
        joint[state(n)] += prob;
    }
    let enumerated = joint[1] / (joint[0] + joint[1]);

    let mut belief = DiscreteBelief::new(model.initial().clone())?;
    for &symbol in &symbols[..n] {
        belief = hmm_filter_step(&model, &belief, symbol)?;
    }
    println!(
        "enumeration cross-check at k = {n}: filter {:.15}, brute force {:.15}, gap {:.1e}",
        belief.prob(1),
        enumerated,
        (belief.prob(1) - enumerated).abs()
    );
    Ok(())
}
