// Diagnostic: inspect archetype geometry for the acceptance corpus seed.
use repkit::rng::mix;
use repkit::synthgen::sample_archetype;

fn main() {
    for ei in 0..10u64 {
        let period = 0.8 + (6.0 - 0.8) * ei as f64 / 9.0;
        let arch = sample_archetype(format!("ex{ei:02}"), period, mix(&[7, 0xA2C4, ei]));
        let n = (period * 92.0).round();
        let orders: Vec<Vec<u32>> = arch
            .harmonics
            .iter()
            .map(|ch| ch.iter().map(|h| h.order).collect())
            .collect();
        println!(
            "ex{ei:02}: period={period:.2}s n={n} peak_phase={:.3} width={:.3} orders={orders:?}",
            arch.peak_phase, arch.peak_width
        );
    }
}
