//! Code grids, codebooks and the assignment / straight-through / VQ-loss
//! operations of the quantization bottleneck.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// `frames × groups` matrix of codes, each in `[0, codebook_size)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CodeGrid {
    frames: usize,
    groups: usize,
    codebook_size: usize,
    codes: Vec<usize>,
}

impl CodeGrid {
    pub fn new(frames: usize, groups: usize, codebook_size: usize, codes: Vec<usize>) -> Result<Self> {
        if frames == 0 || groups == 0 || codebook_size == 0 {
            return Err(Error::Input(format!(
                "code grid needs positive dimensions, got T={frames} N={groups} K={codebook_size}"
            )));
        }
        if codes.len() != frames * groups {
            return Err(Error::Input(format!(
                "code grid {frames}×{groups} needs {} codes, got {}",
                frames * groups,
                codes.len()
            )));
        }
        if let Some(&bad) = codes.iter().find(|&&c| c >= codebook_size) {
            return Err(Error::Input(format!("code {bad} out of range [0, {codebook_size})")));
        }
        Ok(Self {
            frames,
            groups,
            codebook_size,
            codes,
        })
    }

    pub fn from_frames(frames: &[Vec<usize>], codebook_size: usize) -> Result<Self> {
        let groups = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != groups) {
            return Err(Error::Input("frames have differing group counts".into()));
        }
        Self::new(frames.len(), groups, codebook_size, frames.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn get(&self, t: usize, i: usize) -> usize {
        self.codes[t * self.groups + i]
    }

    pub fn frame(&self, t: usize) -> &[usize] {
        &self.codes[t * self.groups..(t + 1) * self.groups]
    }

    pub fn group(&self, i: usize) -> Vec<usize> {
        (0..self.frames).map(|t| self.get(t, i)).collect()
    }

    pub fn codes(&self) -> &[usize] {
        &self.codes
    }

    /// Frames `start..start+len` as a new grid.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::Input(format!("frame range {start}..{} of {}", start + len, self.frames)));
        }
        Self::new(
            len,
            self.groups,
            self.codebook_size,
            self.codes[start * self.groups..(start + len) * self.groups].to_vec(),
        )
    }

    /// Frames of `self` followed by frames of `other`.
    pub fn concat(&self, other: &CodeGrid) -> Result<Self> {
        if self.groups != other.groups || self.codebook_size != other.codebook_size {
            return Err(Error::Input("cannot concatenate grids with different layouts".into()));
        }
        let mut codes = self.codes.clone();
        codes.extend_from_slice(&other.codes);
        Self::new(self.frames + other.frames, self.groups, self.codebook_size, codes)
    }
}

/// `N` codebooks of `K` embeddings each, every embedding `group_dim` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookSet {
    books: Vec<Tensor>,
}

impl CodebookSet {
    pub fn new(books: Vec<Tensor>) -> Result<Self> {
        let first = books.first().ok_or_else(|| Error::Config("no codebooks".into()))?;
        let (k, gd) = first.dims2()?;
        for b in &books {
            if b.shape() != [k, gd] {
                return Err(Error::shape("codebook", first.shape(), b.shape()));
            }
            if !b.is_finite() {
                return Err(Error::Numeric("non-finite codebook entry".into()));
            }
        }
        Ok(Self { books })
    }

    pub fn groups(&self) -> usize {
        self.books.len()
    }

    pub fn size(&self) -> usize {
        self.books[0].rows()
    }

    pub fn group_dim(&self) -> usize {
        self.books[0].cols()
    }

    pub fn latent_dim(&self) -> usize {
        self.groups() * self.group_dim()
    }

    pub fn book(&self, i: usize) -> &Tensor {
        &self.books[i]
    }

    pub fn embedding(&self, group: usize, code: usize) -> &[f64] {
        self.books[group].row(code)
    }
}

/// Splits `z` into `n` equal consecutive parts.
pub fn slice_groups(z: &[f64], n: usize) -> Result<Vec<&[f64]>> {
    if n == 0 || !z.len().is_multiple_of(n) {
        return Err(Error::Config(format!("latent width {} not divisible into {n} groups", z.len())));
    }
    Ok(z.chunks(z.len() / n).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest embedding in each group's codebook (Euclidean); ties go to the
/// lowest index.
pub fn assign_codes(parts: &[&[f64]], books: &CodebookSet) -> Result<Vec<usize>> {
    if parts.len() != books.groups() {
        return Err(Error::Input(format!("{} parts for {} codebooks", parts.len(), books.groups())));
    }
    parts
        .iter()
        .enumerate()
        .map(|(i, part)| {
            if part.len() != books.group_dim() {
                return Err(Error::shape("assign_codes", &[part.len()], &[books.group_dim()]));
            }
            let book = books.book(i);
            let mut best = (0, f64::INFINITY);
            for k in 0..books.size() {
                let d = sq_dist(part, book.row(k));
                if d < best.1 {
                    best = (k, d);
                }
            }
            Ok(best.0)
        })
        .collect()
}

/// Assigns every row of a `[frames, d]` latent matrix.
pub fn assign_grid(latents: &Tensor, books: &CodebookSet) -> Result<CodeGrid> {
    let (t, d) = latents.dims2()?;
    if d != books.latent_dim() {
        return Err(Error::shape("assign_grid", latents.shape(), &[books.groups(), books.group_dim()]));
    }
    let mut codes = Vec::with_capacity(t * books.groups());
    for r in 0..t {
        let parts = slice_groups(latents.row(r), books.groups())?;
        codes.extend(assign_codes(&parts, books)?);
    }
    CodeGrid::new(t, books.groups(), books.size(), codes)
}

/// Concatenated embeddings of every frame, `[frames, d]`.
pub fn lookup(codes: &CodeGrid, books: &CodebookSet) -> Result<Tensor> {
    if codes.groups() != books.groups() || codes.codebook_size() != books.size() {
        return Err(Error::Input("code grid does not match codebooks".into()));
    }
    let mut out = Vec::with_capacity(codes.frames() * books.latent_dim());
    for t in 0..codes.frames() {
        for (i, &c) in codes.frame(t).iter().enumerate() {
            out.extend_from_slice(books.embedding(i, c));
        }
    }
    Tensor::new([codes.frames(), books.latent_dim()], out)
}

/// Quantized latents whose forward value is the concatenation of the selected
/// embeddings and whose gradient flows unchanged into `latents`.
pub fn straight_through(tape: &mut Tape, latents: Var, books: &CodebookSet, codes: &CodeGrid) -> Result<Var> {
    let q = lookup(codes, books)?;
    tape.straight_through(latents, &q)
}

/// `(1/T)·Σ_i Σ_t ( ‖sg[z_c] − z_q‖² + γ‖z_c − sg[z_q]‖² )`, summed (not
/// averaged) over groups.
///
/// `books` are the codebook tensors on the tape; the codebook term sends
/// gradient only into the selected rows.
pub fn vq_loss(tape: &mut Tape, latents: Var, books: &[Var], codes: &CodeGrid, gamma: f64) -> Result<Var> {
    let (t, d) = tape.value(latents).dims2()?;
    let n = books.len();
    if n != codes.groups() || d % n != 0 {
        return Err(Error::Input("vq_loss: codebooks do not match latents".into()));
    }
    let gd = d / n;
    let mut terms = Vec::with_capacity(2 * n);
    for (i, &book) in books.iter().enumerate() {
        let zc = tape.slice_cols(latents, i * gd, gd)?;
        let zq = tape.gather_rows(book, &codes.group(i))?;
        let zc_sg = tape.stop_gradient(zc);
        let zq_sg = tape.stop_gradient(zq);
        let a = tape.sub(zc_sg, zq)?;
        let a = tape.square(a);
        let a = tape.sum(a);
        let b = tape.sub(zc, zq_sg)?;
        let b = tape.square(b);
        let b = tape.sum(b);
        let b = tape.scale(b, gamma);
        terms.push(a);
        terms.push(b);
    }
    let all = tape.concat_rows(&terms)?;
    let total = tape.sum(all);
    Ok(tape.scale(total, 1.0 / t as f64))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{check_gradients, Coords};

    fn book2() -> CodebookSet {
        CodebookSet::new(vec![Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap()]).unwrap()
    }

    #[test]
    fn slice_examples() {
        let z: Vec<f64> = (0..8).map(f64::from).collect();
        let parts = slice_groups(&z, 4).unwrap();
        assert_eq!(parts.len(), 4);
        assert!(parts.iter().all(|p| p.len() == 2));
        assert_eq!(slice_groups(&z, 1).unwrap(), vec![&z[..]]);
        assert!(matches!(slice_groups(&z, 3), Err(Error::Config(_))));
    }

    #[test]
    fn assignment_examples() {
        let b = book2();
        assert_eq!(assign_codes(&[&[0.4, 0.4]], &b).unwrap(), vec![0]);
        assert_eq!(assign_codes(&[&[0.5, 0.5]], &b).unwrap(), vec![0]);
        assert_eq!(assign_codes(&[&[0.6, 0.5]], &b).unwrap(), vec![1]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let big = CodebookSet::new(vec![Tensor::randn([10, 3], 1.0, &mut rng)]).unwrap();
        let e7 = big.embedding(0, 7).to_vec();
        assert_eq!(assign_codes(&[&e7], &big).unwrap(), vec![7]);
    }

    #[test]
    fn vq_loss_hand_case() {
        let mut tape = Tape::new();
        let zc = tape.param(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let book = tape.param(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let codes = CodeGrid::new(1, 1, 1, vec![0]).unwrap();
        let l = vq_loss(&mut tape, zc, &[book], &codes, 0.25).unwrap();
        assert!((tape.value(l).item() - 1.25).abs() < 1e-15);
    }

    #[test]
    fn vq_loss_zero_when_latents_are_codewords() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let books = CodebookSet::new((0..2).map(|_| Tensor::randn([5, 3], 1.0, &mut rng)).collect()).unwrap();
        let codes = CodeGrid::new(3, 2, 5, vec![1, 4, 0, 0, 3, 2]).unwrap();
        let z = lookup(&codes, &books).unwrap();
        let mut tape = Tape::new();
        let zc = tape.param(z);
        let bv: Vec<Var> = (0..2).map(|i| tape.param(books.book(i).clone())).collect();
        let l = vq_loss(&mut tape, zc, &bv, &codes, 0.25).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn vq_codebook_gradient_is_two_residual_over_t_on_selected_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Tensor::randn([4, 2], 1.0, &mut rng);
        let book = Tensor::randn([3, 2], 1.0, &mut rng);
        let books = CodebookSet::new(vec![book.clone()]).unwrap();
        let codes = assign_grid(&z, &books).unwrap();

        // finite differences on the replayed (stop-gradient frozen) loss
        let report = check_gradients(
            |t, v| vq_loss(t, v[0], &[v[1]], &codes, 0.25),
            &[z.clone(), book.clone()],
            Coords::All,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");

        let mut tape = Tape::new();
        let zc = tape.param(z.clone());
        let bv = tape.param(book.clone());
        let l = vq_loss(&mut tape, zc, &[bv], &codes, 0.25).unwrap();
        let g = tape.grad(l, &[zc, bv]).unwrap();
        let mut expect = vec![0.0; 6];
        for t in 0..4 {
            let c = codes.get(t, 0);
            for j in 0..2 {
                expect[c * 2 + j] += 2.0 * (book.at(c, j) - z.at(t, j)) / 4.0;
            }
        }
        for (a, e) in g[1].data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
        // latent side carries only the commitment term
        for t in 0..4 {
            let c = codes.get(t, 0);
            for j in 0..2 {
                let e = 2.0 * 0.25 * (z.at(t, j) - book.at(c, j)) / 4.0;
                assert!((g[0].at(t, j) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn straight_through_forward_is_exact_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let books = CodebookSet::new((0..4).map(|_| Tensor::randn([6, 2], 1.0, &mut rng)).collect()).unwrap();
        let z = Tensor::randn([5, 8], 1.0, &mut rng);
        let codes = assign_grid(&z, &books).unwrap();
        let mut tape = Tape::new();
        let zc = tape.param(z);
        let zq = straight_through(&mut tape, zc, &books, &codes).unwrap();
        assert_eq!(tape.value(zq), &lookup(&codes, &books).unwrap());
    }

    proptest! {
        #[test]
        fn slice_concat_round_trip(z in proptest::collection::vec(-10.0f64..10.0, 1..8), n in 1usize..5) {
            let mut zz = z.clone();
            zz.resize(z.len() * n, 0.5);
            let parts = slice_groups(&zz, n).unwrap();
            prop_assert_eq!(parts.concat(), zz);
        }

        #[test]
        fn assignment_is_idempotent(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let books = CodebookSet::new((0..3).map(|_| Tensor::randn([7, 2], 1.0, &mut rng)).collect()).unwrap();
            let z = Tensor::randn([6, 6], 1.5, &mut rng);
            let codes = assign_grid(&z, &books).unwrap();
            let again = assign_grid(&lookup(&codes, &books).unwrap(), &books).unwrap();
            prop_assert_eq!(codes, again);
        }

        #[test]
        fn vq_loss_nonnegative(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let books = CodebookSet::new((0..2).map(|_| Tensor::randn([4, 3], 1.0, &mut rng)).collect()).unwrap();
            let z = Tensor::randn([5, 6], 1.0, &mut rng);
            let codes = assign_grid(&z, &books).unwrap();
            let mut tape = Tape::new();
            let zc = tape.param(z);
            let bv: Vec<Var> = (0..2).map(|i| tape.param(books.book(i).clone())).collect();
            let l = vq_loss(&mut tape, zc, &bv, &codes, 0.25).unwrap();
            prop_assert!(tape.value(l).item() > 0.0);
        }
    }
}
