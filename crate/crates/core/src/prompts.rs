//! Biased known/unknown prompt construction.
//!
//! Known class `c`: `[s₁+β, …, s_m+β, CLS_c]`. Unknown: `[u₁+β, …, u_m+β, UNK]`.
//! The same `β` is added to every context position of every row and to no
//! class-token position. Rows follow label-space order with the unknown row last.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::config::ContextInit;
use crate::encoders::{TextEncoder, TokenBank};
use crate::error::{validation, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::gaussian;

/// Standard deviation of Gaussian context initialization.
pub const CONTEXT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptState<T> {
    /// `s`: shared by every known class, `m × d_t`.
    pub known_context: Array2<T>,
    /// `u`: `m × d_t`. Unused when prompts are shared.
    pub unknown_context: Array2<T>,
    pub token_bank: TokenBank<T>,
    /// When true the unknown row is built from `s` instead of `u`.
    pub shared: bool,
}

/// Per-row token sequences, known classes first, unknown row last.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptMatrix<T> {
    pub sequences: Vec<Array2<T>>,
}

impl<T> PromptMatrix<T> {
    pub fn num_rows(&self) -> usize {
        self.sequences.len()
    }

    pub fn unknown_row(&self) -> usize {
        self.sequences.len() - 1
    }
}

/// Gradients reaching the learnable prompt pieces and the bias token.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGrads<T> {
    pub known_context: Array2<T>,
    pub unknown_context: Array2<T>,
    pub beta: Array1<T>,
}

impl<T: Scalar> PromptState<T> {
    /// Initializes both contexts independently from `rng`.
    pub fn init<R: Rng + ?Sized>(
        context_length: usize,
        token_bank: TokenBank<T>,
        init: ContextInit,
        separate: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if context_length == 0 {
            return Err(validation("context length must be at least 1"));
        }
        let dim = token_bank.token_dim();
        let mut known_context: Array2<T> = gaussian((context_length, dim), CONTEXT_INIT_STD, rng);
        let unknown_context: Array2<T> = gaussian((context_length, dim), CONTEXT_INIT_STD, rng);
        if init == ContextInit::Template {
            let template = token_bank.template_tokens();
            let n = template.nrows().min(context_length);
            known_context.slice_mut(s![..n, ..]).assign(&template.slice(s![..n, ..]));
        }
        Ok(PromptState {
            known_context,
            unknown_context,
            token_bank,
            shared: !separate,
        })
    }

    pub fn context_length(&self) -> usize {
        self.known_context.nrows()
    }

    pub fn token_dim(&self) -> usize {
        self.known_context.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.token_bank.num_classes() + 1
    }

    /// Context feeding the unknown row.
    pub fn unknown_source(&self) -> ArrayView2<'_, T> {
        if self.shared {
            self.known_context.view()
        } else {
            self.unknown_context.view()
        }
    }

    fn check_beta(&self, beta: ArrayView1<T>) -> Result<()> {
        if beta.len() != self.token_dim() {
            return Err(Error::Dimension {
                context: "domain bias token".into(),
                expected: self.token_dim(),
                found: beta.len(),
            });
        }
        if self.unknown_context.dim() != self.known_context.dim() {
            return Err(Error::ShapeMismatch {
                name: "unknown_context".into(),
                expected: vec![self.context_length(), self.token_dim()],
                found: self.unknown_context.shape().to_vec(),
            });
        }
        if self.token_bank.token_dim() != self.token_dim() {
            return Err(Error::Dimension {
                context: "token bank".into(),
                expected: self.token_dim(),
                found: self.token_bank.token_dim(),
            });
        }
        Ok(())
    }
}

fn biased_sequence<T: Scalar>(context: ArrayView2<T>, beta: ArrayView1<T>, tail: ArrayView2<T>) -> Array2<T> {
    let m = context.nrows();
    let mut seq = Array2::zeros((m + tail.nrows(), context.ncols()));
    {
        let mut head = seq.slice_mut(s![..m, ..]);
        head.assign(&context);
        head += &beta;
    }
    seq.slice_mut(s![m.., ..]).assign(&tail);
    seq
}

/// One sequence per known class, in label-space order.
pub fn build_known_prompts<T: Scalar>(state: &PromptState<T>, beta: ArrayView1<T>) -> Result<Vec<Array2<T>>> {
    state.check_beta(beta)?;
    Ok((0..state.token_bank.num_classes())
        .map(|c| biased_sequence(state.known_context.view(), beta, state.token_bank.class_tokens(c)))
        .collect())
}

pub fn build_unknown_prompt<T: Scalar>(state: &PromptState<T>, beta: ArrayView1<T>) -> Result<Array2<T>> {
    state.check_beta(beta)?;
    Ok(biased_sequence(state.unknown_source(), beta, state.token_bank.unk_tokens()))
}

pub fn build_prompt_matrix<T: Scalar>(state: &PromptState<T>, beta: ArrayView1<T>) -> Result<PromptMatrix<T>> {
    let mut sequences = build_known_prompts(state, beta)?;
    sequences.push(build_unknown_prompt(state, beta)?);
    Ok(PromptMatrix { sequences })
}

fn check_fits<T: Scalar, E: TextEncoder<T>>(prompts: &PromptMatrix<T>, encoder: &E) -> Result<()> {
    let limit = encoder.max_sequence_length();
    for (row, seq) in prompts.sequences.iter().enumerate() {
        if seq.nrows() > limit {
            return Err(validation(format!(
                "prompt row {row} has {} tokens, encoder accepts at most {limit}",
                seq.nrows()
            )));
        }
    }
    Ok(())
}

/// Text features `W`, one unit-norm row per output slot.
pub fn assemble_text_features<T: Scalar, E: TextEncoder<T>>(
    state: &PromptState<T>,
    beta: ArrayView1<T>,
    encoder: &E,
) -> Result<Array2<T>> {
    let prompts = build_prompt_matrix(state, beta)?;
    check_fits(&prompts, encoder)?;
    let rows = prompts
        .sequences
        .iter()
        .map(|seq| encoder.encode(seq.view()))
        .collect::<Result<Vec<_>>>()?;
    Ok(stack_rows(&rows))
}

/// Like [`assemble_text_features`] but keeps the encoder tapes for backward.
pub fn assemble_with_tapes<T: Scalar, E: TextEncoder<T>>(
    state: &PromptState<T>,
    beta: ArrayView1<T>,
    encoder: &E,
) -> Result<(Array2<T>, Vec<E::Tape>)> {
    let prompts = build_prompt_matrix(state, beta)?;
    check_fits(&prompts, encoder)?;
    let mut rows = Vec::with_capacity(prompts.num_rows());
    let mut tapes = Vec::with_capacity(prompts.num_rows());
    for seq in &prompts.sequences {
        let (row, tape) = encoder.forward(seq.view())?;
        rows.push(row);
        tapes.push(tape);
    }
    Ok((stack_rows(&rows), tapes))
}

pub(crate) fn stack_rows<T: Scalar>(rows: &[Array1<T>]) -> Array2<T> {
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::stack(Axis(0), &views).expect("rows share a dimension")
}

/// Routes per-row gradients `∂L/∂τ_row` back to `s`, `u` and `β`.
///
/// Class and UNK token positions receive gradient from the encoder but the
/// bank is frozen, so those slices are dropped here.
pub fn backprop_prompts<T: Scalar, E: TextEncoder<T>>(
    state: &PromptState<T>,
    encoder: &E,
    tapes: &[E::Tape],
    grad_rows: ArrayView2<T>,
) -> PromptGrads<T> {
    let m = state.context_length();
    let dim = state.token_dim();
    let mut known = Array2::zeros((m, dim));
    let mut unknown = Array2::zeros((m, dim));
    let unk_row = tapes.len() - 1;
    for (row, tape) in tapes.iter().enumerate() {
        let g = grad_rows.row(row);
        if g.iter().all(|x| *x == T::zero()) {
            continue;
        }
        let tokens = encoder.backward(tape, g);
        let head = tokens.slice(s![..m, ..]);
        if row == unk_row && !state.shared {
            unknown += &head;
        } else {
            known += &head;
        }
    }
    let beta = known.sum_axis(Axis(0)) + unknown.sum_axis(Axis(0));
    PromptGrads {
        known_context: known,
        unknown_context: unknown,
        beta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::toy_backend;
    use crate::label::build_label_space;
    use crate::tensor::l2_norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(m: usize, dim: usize, classes: &[&str]) -> PromptState<f64> {
        let be = toy_backend::<f64>(6, dim, 1).unwrap();
        let labels = build_label_space(classes.iter().copied()).unwrap();
        let bank = TokenBank::build(&be.embedder, &labels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        PromptState::init(m, bank, ContextInit::Gaussian, true, &mut rng).unwrap()
    }

    #[test]
    fn zero_bias_gives_unbiased_prompts() {
        let st = state(4, 5, &["cat", "dog"]);
        let zero = Array1::zeros(5);
        let known = build_known_prompts(&st, zero.view()).unwrap();
        for (c, seq) in known.iter().enumerate() {
            assert_eq!(seq.slice(s![..4, ..]), st.known_context);
            assert_eq!(seq.slice(s![4.., ..]), st.token_bank.class_tokens(c));
        }
        let unk = build_unknown_prompt(&st, zero.view()).unwrap();
        assert_eq!(unk.slice(s![..4, ..]), st.unknown_context);
        assert_eq!(unk.slice(s![4.., ..]), st.token_bank.unk_tokens());
    }

    #[test]
    fn bias_broadcast_only_touches_context() {
        let st = state(3, 5, &["bike helmet", "cat"]);
        let beta = ndarray::array![0.5, -1.0, 0.25, 2.0, 0.0];
        let pm = build_prompt_matrix(&st, beta.view()).unwrap();
        assert_eq!(pm.num_rows(), 3);
        for (row, seq) in pm.sequences.iter().enumerate() {
            let ctx = if row == pm.unknown_row() { &st.unknown_context } else { &st.known_context };
            for i in 0..3 {
                let expected = &ctx.row(i) + &beta;
                assert_eq!(seq.row(i), expected);
            }
            let tail = if row == pm.unknown_row() {
                st.token_bank.unk_tokens()
            } else {
                st.token_bank.class_tokens(row)
            };
            assert_eq!(seq.slice(s![3.., ..]), tail);
            assert_eq!(seq.nrows(), 3 + tail.nrows());
        }
        // shared context across known classes
        assert_eq!(pm.sequences[0].slice(s![..3, ..]), pm.sequences[1].slice(s![..3, ..]));
    }

    #[test]
    fn shape_for_ten_classes() {
        let names: Vec<String> = (0..10).map(|i| format!("class{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let st = state(4, 8, &refs);
        let beta = Array1::from_elem(8, 0.1);
        let known = build_known_prompts(&st, beta.view()).unwrap();
        assert_eq!(known.len(), 10);
        assert!(known.iter().all(|k| k.nrows() == 5));
    }

    #[test]
    fn equal_contexts_differ_only_in_tail() {
        let mut st = state(2, 5, &["cat"]);
        st.unknown_context = st.known_context.clone();
        let beta = Array1::from_elem(5, 0.3);
        let pm = build_prompt_matrix(&st, beta.view()).unwrap();
        assert_eq!(pm.sequences[0].slice(s![..2, ..]), pm.sequences[1].slice(s![..2, ..]));
        assert_ne!(pm.sequences[0].slice(s![2.., ..]), pm.sequences[1].slice(s![2.., ..]));
    }

    #[test]
    fn rejects_wrong_bias_dimension() {
        let st = state(2, 5, &["cat"]);
        let beta = Array1::zeros(4);
        assert!(build_known_prompts(&st, beta.view()).is_err());
        assert!(build_unknown_prompt(&st, beta.view()).is_err());
    }

    #[test]
    fn text_features_rows_and_norms() {
        let be = toy_backend::<f64>(6, 5, 1).unwrap();
        let names: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let labels = build_label_space(names.clone()).unwrap();
        let bank = TokenBank::build(&be.embedder, &labels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let st = PromptState::init(4, bank, ContextInit::Gaussian, true, &mut rng).unwrap();
        let beta: Array1<f64> = gaussian(5, 0.1, &mut rng);
        let w = assemble_text_features(&st, beta.view(), &be.text).unwrap();
        assert_eq!(w.nrows(), 11);
        for row in w.rows() {
            assert!((l2_norm(row) - 1.0).abs() < 1e-6);
        }

        // reversing the label order reverses the known rows
        let mut reversed = names.clone();
        reversed.reverse();
        let labels_r = build_label_space(reversed).unwrap();
        let st_r = PromptState {
            token_bank: TokenBank::build(&be.embedder, &labels_r).unwrap(),
            ..st.clone()
        };
        let w_r = assemble_text_features(&st_r, beta.view(), &be.text).unwrap();
        for c in 0..10 {
            assert_eq!(w.row(c), w_r.row(9 - c));
        }
        assert_eq!(w.row(10), w_r.row(10));
    }

    #[test]
    fn overflowing_sequence_is_an_error() {
        let st = state(80, 5, &["cat"]);
        let be = toy_backend::<f64>(6, 5, 1).unwrap();
        let beta = Array1::zeros(5);
        assert!(assemble_text_features(&st, beta.view(), &be.text).is_err());
    }

    #[test]
    fn template_init_copies_template_tokens() {
        let be = toy_backend::<f64>(6, 5, 1).unwrap();
        let labels = build_label_space(["cat"]).unwrap();
        let bank: TokenBank<f64> = TokenBank::build(&be.embedder, &labels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let st = PromptState::init(6, bank.clone(), ContextInit::Template, true, &mut rng).unwrap();
        assert_eq!(st.known_context.slice(s![..4, ..]), bank.template_tokens());
        assert_ne!(st.known_context, st.unknown_context);
    }

    #[test]
    fn unknown_context_gradient_is_nonzero_and_matches_differences() {
        let be = toy_backend::<f64>(6, 5, 3).unwrap();
        let labels = build_label_space(["cat", "dog"]).unwrap();
        let bank = TokenBank::build(&be.embedder, &labels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let st = PromptState::init(2, bank.clone(), ContextInit::Gaussian, true, &mut rng).unwrap();
        let beta: Array1<f64> = gaussian(5, 0.1, &mut rng);
        let probe: Array2<f64> = gaussian((3, 6), 1.0, &mut rng);
        let loss = |s: &PromptState<f64>| {
            let w = assemble_text_features(s, beta.view(), &be.text).unwrap();
            (&w * &probe).sum()
        };
        let (_, tapes) = assemble_with_tapes(&st, beta.view(), &be.text).unwrap();
        let g = backprop_prompts(&st, &be.text, &tapes, probe.view());
        assert!(g.unknown_context.iter().any(|x| x.abs() > 1e-8));
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..5 {
                let (mut a, mut b) = (st.clone(), st.clone());
                a.unknown_context[[i, j]] += h;
                b.unknown_context[[i, j]] -= h;
                let numeric = (loss(&a) - loss(&b)) / (2.0 * h);
                assert!((numeric - g.unknown_context[[i, j]]).abs() < 1e-6);
            }
        }
        // token bank entries are constants: nothing in the state depends on them being learnable
        assert_eq!(st.token_bank, bank);
    }
}
