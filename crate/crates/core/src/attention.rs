//! Scaled dot-product attention, key/value records and caches, and the
//! injection policy deciding which recorded features replace a site's own.

use alloc::borrow::ToOwned;
use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::backend::AttentionSite;
use crate::error::{Error, Result};

/// Upper bound on the score buffer (in floats) materialised per head.
const SCORE_BLOCK: usize = 1 << 22;

/// A dense row-major matrix of feature vectors (one row per token).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRows {
    rows: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureRows {
    pub fn new(rows: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * width {
            return Err(Error::Shape(format!(
                "{} values for {rows} rows of width {width}",
                data.len()
            )));
        }
        Ok(Self { rows, width, data })
    }

    pub fn zeros(rows: usize, width: usize) -> Self {
        Self {
            rows,
            width,
            data: vec![0.0; rows * width],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.width..(r + 1) * self.width]
    }

    /// Rows reordered so that output row `i` is input row `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &r in order {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: order.len(),
            width: self.width,
            data,
        }
    }
}

/// `C = alpha * A B` over strided views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // Last element each view touches must be in bounds.
    let reach = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs;
    if k > 0 {
        assert!(reach(m, k, rsa, csa) < a.len());
        assert!(reach(k, n, rsb, csb) < b.len());
    }
    assert!(reach(m, n, rsc, csc) < c.len());
    // SAFETY: every index reachable through the given dimensions and strides
    // was checked to lie inside its slice above; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Plain matrix product `a b`.
pub fn matmul(a: &FeatureRows, b: &FeatureRows) -> Result<FeatureRows> {
    if a.width != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.width, b.rows, b.width
        )));
    }
    let mut out = FeatureRows::zeros(a.rows, b.width);
    if a.width == 0 {
        return Ok(out);
    }
    gemm(
        a.rows,
        a.width,
        b.width,
        1.0,
        &a.data,
        (a.width, 1),
        &b.data,
        (b.width, 1),
        &mut out.data,
        (b.width, 1),
    );
    Ok(out)
}

/// Numerically stable in-place softmax over each row of a `cols`-wide buffer.
pub fn softmax_rows(buf: &mut [f32], cols: usize) {
    for row in buf.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = libm::expf(*v - max);
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

fn check_operands(q: &FeatureRows, k: &FeatureRows, v: &FeatureRows, heads: usize) -> Result<()> {
    if k.rows == 0 {
        return Err(Error::Attention("keys are empty".to_owned()));
    }
    if q.width != k.width || k.width != v.width {
        return Err(Error::Attention(format!(
            "widths differ: Q {} K {} V {}",
            q.width, k.width, v.width
        )));
    }
    if k.rows != v.rows {
        return Err(Error::Attention(format!(
            "{} key rows vs {} value rows",
            k.rows, v.rows
        )));
    }
    if heads == 0 || !q.width.is_multiple_of(heads) {
        return Err(Error::Attention(format!(
            "width {} does not split into {heads} heads",
            q.width
        )));
    }
    Ok(())
}

/// `Softmax(Q Kᵀ / sqrt(d)) V` for a single head of width `d`.
pub fn attend(q: &FeatureRows, k: &FeatureRows, v: &FeatureRows) -> Result<FeatureRows> {
    attend_multihead(q, k, v, 1)
}

/// Multi-head attention: columns are split into `heads` equal groups and each
/// group attends independently with scale `1 / sqrt(width / heads)`.
pub fn attend_multihead(q: &FeatureRows, k: &FeatureRows, v: &FeatureRows, heads: usize) -> Result<FeatureRows> {
    check_operands(q, k, v, heads)?;
    let width = q.width;
    let dh = width / heads;
    let (lq, lk) = (q.rows, k.rows);
    let scale = 1.0 / libm::sqrtf(dh as f32);
    let mut out = FeatureRows::zeros(lq, width);
    let block = (SCORE_BLOCK / lk).clamp(1, lq.max(1));
    let mut scores = vec![0.0f32; block * lk];
    for h in 0..heads {
        let col = h * dh;
        let mut r0 = 0;
        while r0 < lq {
            let m = block.min(lq - r0);
            let s = &mut scores[..m * lk];
            gemm(
                m,
                dh,
                lk,
                scale,
                &q.data[r0 * width + col..],
                (width, 1),
                &k.data[col..],
                (1, width),
                s,
                (lk, 1),
            );
            softmax_rows(s, lk);
            gemm(
                m,
                lk,
                dh,
                1.0,
                s,
                (lk, 1),
                &v.data[col..],
                (width, 1),
                &mut out.data[r0 * width + col..],
                (width, 1),
            );
            r0 += m;
        }
    }
    Ok(out)
}

/// Attention probabilities `Softmax(Q Kᵀ / sqrt(d))` of one head.
pub fn attention_probs(q: &FeatureRows, k: &FeatureRows) -> Result<FeatureRows> {
    check_operands(q, k, k, 1)?;
    let (lq, lk) = (q.rows, k.rows);
    let mut s = FeatureRows::zeros(lq, lk);
    gemm(
        lq,
        q.width,
        lk,
        1.0 / libm::sqrtf(q.width as f32),
        &q.data,
        (q.width, 1),
        &k.data,
        (1, k.width),
        &mut s.data,
        (lk, 1),
    );
    softmax_rows(&mut s.data, lk);
    Ok(s)
}

/// Keys and values recorded at one attention site for one pass and step.
#[derive(Debug, Clone, PartialEq)]
pub struct KvRecord {
    keys: FeatureRows,
    values: FeatureRows,
    heads: usize,
}

impl KvRecord {
    pub fn new(keys: FeatureRows, values: FeatureRows, heads: usize) -> Result<Self> {
        if keys.rows != values.rows || keys.width != values.width {
            return Err(Error::Shape(format!(
                "keys {}x{} vs values {}x{}",
                keys.rows, keys.width, values.rows, values.width
            )));
        }
        if heads == 0 || !keys.width.is_multiple_of(heads) {
            return Err(Error::Shape(format!(
                "width {} does not split into {heads} heads",
                keys.width
            )));
        }
        if !keys.data.iter().chain(&values.data).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("key/value record"));
        }
        Ok(Self { keys, values, heads })
    }

    pub fn keys(&self) -> &FeatureRows {
        &self.keys
    }

    pub fn values(&self) -> &FeatureRows {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.keys.rows
    }

    pub fn width(&self) -> usize {
        self.keys.width
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn byte_len(&self) -> usize {
        2 * self.keys.data.len() * core::mem::size_of::<f32>()
    }
}

/// Stacks records row-wise in list order.
pub fn concat_kv(records: &[&KvRecord]) -> Result<KvRecord> {
    let first = records
        .first()
        .ok_or_else(|| Error::Attention("nothing to concatenate".to_owned()))?;
    if records.len() == 1 {
        return Ok((*first).clone());
    }
    let (width, heads) = (first.width(), first.heads);
    let mut rows = 0;
    for r in records {
        if r.width() != width || r.heads != heads {
            return Err(Error::Attention(format!(
                "cannot concatenate width {}/{} heads with width {width}/{heads} heads",
                r.width(),
                r.heads
            )));
        }
        rows += r.rows();
    }
    let mut keys = Vec::with_capacity(rows * width);
    let mut values = Vec::with_capacity(rows * width);
    for r in records {
        keys.extend_from_slice(&r.keys.data);
        values.extend_from_slice(&r.values.data);
    }
    Ok(KvRecord {
        keys: FeatureRows {
            rows,
            width,
            data: keys,
        },
        values: FeatureRows {
            rows,
            width,
            data: values,
        },
        heads,
    })
}

/// Read side of a recorded pass.
pub trait KvStore: Send + Sync {
    fn label(&self) -> &str;

    fn fetch(&self, site: AttentionSite, t: usize) -> Result<Arc<KvRecord>>;

    /// Number of `(site, t)` entries.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Write side of a recording pass. Sealing freezes the entries.
pub trait KvRecorder {
    fn put(&mut self, site: AttentionSite, t: usize, record: KvRecord) -> Result<()>;

    fn seal(self: Box<Self>) -> Result<Arc<dyn KvStore>>;
}

/// Where recording passes keep their features.
pub trait CacheStorage {
    fn create(&self, label: &str) -> Result<Box<dyn KvRecorder>>;
}

/// In-memory write-once store of recorded features keyed by `(site, t)`.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    label: String,
    entries: BTreeMap<(AttentionSite, usize), Arc<KvRecord>>,
    widths: BTreeMap<AttentionSite, usize>,
    sealed: bool,
}

impl KvCache {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            ..Self::default()
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn insert(&mut self, site: AttentionSite, t: usize, record: KvRecord) -> Result<()> {
        if self.sealed {
            return Err(Error::CacheSealed(self.label.clone()));
        }
        let width = *self.widths.entry(site).or_insert(record.width());
        if width != record.width() {
            return Err(Error::Shape(format!(
                "cache '{}' site {site}: width {} after {width}",
                self.label,
                record.width()
            )));
        }
        if self.entries.contains_key(&(site, t)) {
            return Err(Error::Storage(format!(
                "cache '{}' already holds site {site} step {t}",
                self.label
            )));
        }
        self.entries.insert((site, t), Arc::new(record));
        Ok(())
    }

    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn get(&self, site: AttentionSite, t: usize) -> Result<Arc<KvRecord>> {
        self.entries.get(&(site, t)).cloned().ok_or_else(|| Error::CacheMiss {
            label: self.label.clone(),
            site,
            t,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (AttentionSite, usize, &Arc<KvRecord>)> {
        self.entries.iter().map(|(&(s, t), r)| (s, t, r))
    }
}

impl KvStore for KvCache {
    fn label(&self) -> &str {
        &self.label
    }

    fn fetch(&self, site: AttentionSite, t: usize) -> Result<Arc<KvRecord>> {
        self.get(site, t)
    }

    fn len(&self) -> usize {
        self.entries.len()
    }
}

impl KvRecorder for KvCache {
    fn put(&mut self, site: AttentionSite, t: usize, record: KvRecord) -> Result<()> {
        self.insert(site, t, record)
    }

    fn seal(mut self: Box<Self>) -> Result<Arc<dyn KvStore>> {
        KvCache::seal(&mut self);
        Ok(Arc::new(*self))
    }
}

/// Keeps recorded features in memory.
#[derive(Debug, Clone, Copy, Default)]
pub struct InMemoryStorage;

impl CacheStorage for InMemoryStorage {
    fn create(&self, label: &str) -> Result<Box<dyn KvRecorder>> {
        Ok(Box::new(KvCache::new(label)))
    }
}

/// Maps the current step to the step whose recorded features are injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexMap {
    /// `t ↦ T - t`
    Reverse,
    /// `t ↦ t`
    Same,
    /// `t ↦ t + k`, clamped to `[0, T]`
    Offset(i64),
}

impl IndexMap {
    pub fn apply(self, t: usize, steps: usize) -> usize {
        match self {
            IndexMap::Reverse => steps - t.min(steps),
            IndexMap::Same => t.min(steps),
            IndexMap::Offset(k) => (t as i64 + k).clamp(0, steps as i64) as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    /// Steps `t = 0 … T-1` moving `z_t → z_{t+1}`; injection while `t < P`.
    Inversion,
    /// Steps `t = T … 1` moving `z_t → z_{t-1}`; the first `S` run plainly.
    Sampling,
}

/// Per-step routing of recorded features into attention sites.
#[derive(Clone)]
pub struct InjectionPolicy {
    active_sites: Vec<AttentionSite>,
    phase: Phase,
    bound: usize,
    steps: usize,
    index_map: IndexMap,
    sources: Vec<Arc<dyn KvStore>>,
}

impl core::fmt::Debug for InjectionPolicy {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("InjectionPolicy")
            .field("active_sites", &self.active_sites)
            .field("phase", &self.phase)
            .field("bound", &self.bound)
            .field("steps", &self.steps)
            .field("index_map", &self.index_map)
            .field("sources", &self.sources.iter().map(|s| s.label()).collect::<Vec<_>>())
            .finish()
    }
}

impl InjectionPolicy {
    /// `bound` is `P` for [`Phase::Inversion`] and `S` for [`Phase::Sampling`].
    pub fn new(
        phase: Phase,
        bound: usize,
        steps: usize,
        active_sites: Vec<AttentionSite>,
        index_map: IndexMap,
        sources: Vec<Arc<dyn KvStore>>,
    ) -> Result<Self> {
        if bound > steps {
            return Err(Error::Config {
                field: match phase {
                    Phase::Inversion => "P",
                    Phase::Sampling => "S",
                },
                reason: format!("{bound} exceeds step count {steps}"),
            });
        }
        let policy = Self {
            active_sites,
            phase,
            bound,
            steps,
            index_map,
            sources,
        };
        if policy.injected_steps() > 0 && !policy.active_sites.is_empty() && policy.sources.is_empty() {
            return Err(Error::Config {
                field: "sources",
                reason: "injection is active but no recorded pass was supplied".to_owned(),
            });
        }
        Ok(policy)
    }

    /// Structure-preserving inversion: reverse-order injection for `t < p`.
    pub fn inversion(
        p: usize,
        steps: usize,
        sites: Vec<AttentionSite>,
        index_map: IndexMap,
        sources: Vec<Arc<dyn KvStore>>,
    ) -> Result<Self> {
        Self::new(Phase::Inversion, p, steps, sites, index_map, sources)
    }

    /// Fine texture sampling: same-step injection once the first `s` steps are done.
    pub fn sampling(s: usize, steps: usize, sites: Vec<AttentionSite>, sources: Vec<Arc<dyn KvStore>>) -> Result<Self> {
        Self::new(Phase::Sampling, s, steps, sites, IndexMap::Same, sources)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn active_sites(&self) -> &[AttentionSite] {
        &self.active_sites
    }

    pub fn sources(&self) -> &[Arc<dyn KvStore>] {
        &self.sources
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_injecting(&self, t: usize) -> bool {
        match self.phase {
            Phase::Inversion => t < self.bound,
            Phase::Sampling => t >= 1 && t <= self.steps - self.bound,
        }
    }

    /// Number of steps in the phase that receive injected features.
    pub fn injected_steps(&self) -> usize {
        match self.phase {
            Phase::Inversion => self.bound,
            Phase::Sampling => self.steps - self.bound,
        }
    }

    /// Source step whose features are injected at step `t`, if any.
    pub fn source_index(&self, t: usize) -> Option<usize> {
        self.is_injecting(t).then(|| self.index_map.apply(t, self.steps))
    }
}

/// Features to inject at `site` on step `t`, concatenated over all sources,
/// or `None` when the site or step is outside the policy.
pub fn resolve_injection(policy: &InjectionPolicy, site: AttentionSite, t: usize) -> Result<Option<Arc<KvRecord>>> {
    if !policy.active_sites.contains(&site) {
        return Ok(None);
    }
    let Some(index) = policy.source_index(t) else {
        return Ok(None);
    };
    match policy.sources.as_slice() {
        [] => Err(Error::Config {
            field: "sources",
            reason: "injection is active but no recorded pass was supplied".to_owned(),
        }),
        [only] => only.fetch(site, index).map(Some),
        many => {
            let fetched = many.iter().map(|s| s.fetch(site, index)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&KvRecord> = fetched.iter().map(|r| r.as_ref()).collect();
            Ok(Some(Arc::new(concat_kv(&refs)?)))
        }
    }
}
