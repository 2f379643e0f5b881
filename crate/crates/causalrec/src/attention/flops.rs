/// Analytic multiply-accumulate count of the two quadratic attention
/// products — q·kᵀ and weights·v — per layer, summed over layers. The
/// interleaved token stream doubles the effective sequence length, so its
/// quadratic cost is exactly 4× the decoupled stream's at equal N, d, and
/// layer count.
pub fn attention_flops(seq_len: usize, d_model: usize, n_layers: usize, interleaved: bool) -> u64 {
    let eff = if interleaved { 2 * seq_len } else { seq_len } as u64;
    let per_layer = 2 * eff * eff * d_model as u64;
    per_layer * n_layers as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interleaving_quadruples_the_quadratic_terms() {
        for n in [1usize, 7, 128, 512] {
            let inter = attention_flops(n, 64, 12, true);
            let dec = attention_flops(n, 64, 12, false);
            assert_eq!(inter, 4 * dec, "n={n}");
        }
    }

    #[test]
    fn single_step_decoupled_is_minimal_nonzero() {
        assert_eq!(attention_flops(1, 8, 1, false), 2 * 8);
    }

    #[test]
    fn matches_closed_form() {
        // 2 · N² · d per product pair, times layers.
        let n = 512u64;
        let d = 64u64;
        let layers = 12u64;
        assert_eq!(attention_flops(512, 64, 12, false), 2 * n * n * d * layers);
        assert_eq!(attention_flops(512, 64, 12, true), 2 * (2 * n) * (2 * n) * d * layers);
    }
}
