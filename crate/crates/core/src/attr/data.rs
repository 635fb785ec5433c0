//! Synthetic product universe, hard-negative triplets, and their files.
//!
//! Every product draws one value per schema key. Keys are split per product
//! into image-only, text-only and shared sets. The image stand-in is a
//! `P×D_in` patch grid: key `k` lives on patch `k mod P`, where a fixed
//! random vector per (key, value) is added; every entry then gets Gaussian
//! noise. The title is the value tokens of the text view in schema order.
//!
//! Directory layout: `schema.txt`, `vocab.txt`, `universe.txt`,
//! `triplets.txt`, `patches.bin` (parameter-file format with tensors named
//! `product.<id>` and `query.<idx>`).

use std::fmt;
use std::fs;
use std::path::Path;

use super::map::AttributeMap;
use super::schema::Schema;
use crate::error::{Error, Result};
use crate::model::vocab::{TokenId, Vocab};
use crate::numeric::{checkpoint, Param, ParamSet, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Which views of a query are visible.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Selector {
    Image,
    Text,
    Multimodal,
}

impl Selector {
    pub const ALL: [Selector; 3] = [Selector::Image, Selector::Text, Selector::Multimodal];

    pub fn as_str(self) -> &'static str {
        match self {
            Selector::Image => "image",
            Selector::Text => "text",
            Selector::Multimodal => "mm",
        }
    }

    pub fn has_image(self) -> bool {
        self != Selector::Text
    }

    pub fn has_text(self) -> bool {
        self != Selector::Image
    }
}

impl std::str::FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" | "img" | "i" => Ok(Selector::Image),
            "text" | "txt" | "t" => Ok(Selector::Text),
            "mm" | "multimodal" => Ok(Selector::Multimodal),
            _ => Err(Error::InvalidArgument(format!(
                "unknown modality selector `{s}` (expected image, text or mm)"
            ))),
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProductRecord {
    pub id: usize,
    pub split: Split,
    /// Index of the category value within the schema's first key.
    pub category: usize,
    pub attrs_img: AttributeMap,
    pub attrs_txt: AttributeMap,
    pub attrs_mm: AttributeMap,
    pub patches: Tensor,
    pub title: Vec<TokenId>,
}

impl ProductRecord {
    /// Attribute view matching a selector; used as the rationale target.
    pub fn attrs(&self, sel: Selector) -> &AttributeMap {
        match sel {
            Selector::Image => &self.attrs_img,
            Selector::Text => &self.attrs_txt,
            Selector::Multimodal => &self.attrs_mm,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub idx: usize,
    pub split: Split,
    pub selector: Selector,
    /// The positive's record with fresh patch noise.
    pub query: ProductRecord,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub products: usize,
    pub triplets: usize,
    pub noise: f64,
    pub patches: usize,
    pub patch_dim: usize,
    /// Fraction of products (highest ids) and triplets held out for test.
    pub test_fraction: f64,
    /// Relative weights of image, text and multimodal query selectors.
    pub selector_ratios: [f64; 3],
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            products: 500,
            triplets: 2000,
            noise: 0.3,
            patches: 8,
            patch_dim: 16,
            test_fraction: 0.2,
            selector_ratios: [1.0, 1.0, 1.0],
            seed: 7,
        }
    }
}

/// A complete synthetic dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: Schema,
    pub vocab: Vocab,
    pub products: Vec<ProductRecord>,
    pub triplets: Vec<Triplet>,
}

fn value_vector(seed: u64, key: &str, value: &str, dim: usize) -> Vec<f64> {
    let mut rng = Rng::derive(seed, &format!("value.{key}.{value}"));
    (0..dim).map(|_| rng.normal()).collect()
}

/// Noise-free patch grid for an image view; `noise_rng` adds σ·N(0,1).
pub fn render_patches(
    schema: &Schema,
    img: &AttributeMap,
    cfg: &GenConfig,
    noise_rng: &mut Rng,
) -> Tensor {
    let (p, d) = (cfg.patches, cfg.patch_dim);
    let mut data = vec![0.0; p * d];
    for (key, values) in img.iter() {
        let k = schema.key_index(key).expect("schema key");
        let row = &mut data[(k % p) * d..(k % p + 1) * d];
        for v in values {
            for (x, e) in row.iter_mut().zip(value_vector(cfg.seed, key, v, d)) {
                *x += e;
            }
        }
    }
    for x in &mut data {
        *x += cfg.noise * noise_rng.normal();
    }
    Tensor::new(vec![p, d], data).expect("shape")
}

fn title_tokens(txt: &AttributeMap, vocab: &Vocab) -> Result<Vec<TokenId>> {
    txt.iter()
        .flat_map(|(_, vs)| vs.iter())
        .map(|v| vocab.id(v))
        .collect()
}

fn check_config(schema: &Schema, cfg: &GenConfig) -> Result<()> {
    if cfg.patches == 0 || cfg.patch_dim == 0 {
        return Err(Error::InvalidArgument("patch grid must be nonempty".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise must be ≥ 0, got {}",
            cfg.noise
        )));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::InvalidArgument(
            "test fraction must lie in [0, 1)".into(),
        ));
    }
    let fine: usize = schema.keys().skip(1).map(|k| k.values.len()).product();
    if fine < 2 {
        return Err(Error::InvalidArgument(
            "schema admits no hard negatives: needs a non-category key with ≥2 values".into(),
        ));
    }
    Ok(())
}

/// Draws `cfg.products` products. The last `test_fraction` of ids are test.
pub fn gen_universe(schema: &Schema, cfg: &GenConfig) -> Result<Vec<ProductRecord>> {
    check_config(schema, cfg)?;
    if cfg.products == 0 {
        return Err(Error::InvalidArgument(
            "at least one product is required".into(),
        ));
    }
    let vocab = Vocab::from_schema(schema)?;
    let mut rng = Rng::derive(cfg.seed, "universe");
    let n_test = (cfg.products as f64 * cfg.test_fraction).round() as usize;
    let first_test = cfg.products - n_test.min(cfg.products);
    let nk = schema.num_keys();
    let mut out = Vec::with_capacity(cfg.products);
    for id in 0..cfg.products {
        let values: Vec<usize> = schema.keys().map(|k| rng.below(k.values.len())).collect();
        // 0 = image only, 1 = text only, 2 = shared
        let views: Vec<usize> = loop {
            if nk == 1 {
                break vec![2];
            }
            let v: Vec<usize> = (0..nk).map(|_| rng.below(3)).collect();
            if v.iter().any(|&x| x != 1) && v.iter().any(|&x| x != 0) {
                break v;
            }
        };
        let (mut img, mut txt, mut mm) = (
            AttributeMap::new(),
            AttributeMap::new(),
            AttributeMap::new(),
        );
        for (k, key) in schema.keys().enumerate() {
            let pair = (key.name.clone(), vec![key.values[values[k]].clone()]);
            if views[k] != 1 {
                img.insert(pair.0.clone(), pair.1.clone())?;
            }
            if views[k] != 0 {
                txt.insert(pair.0.clone(), pair.1.clone())?;
            }
            mm.insert(pair.0, pair.1)?;
        }
        let patches = render_patches(schema, &img, cfg, &mut rng);
        let title = title_tokens(&txt, &vocab)?;
        out.push(ProductRecord {
            id,
            split: if id >= first_test {
                Split::Test
            } else {
                Split::Train
            },
            category: values[0],
            attrs_img: img,
            attrs_txt: txt,
            attrs_mm: mm,
            patches,
            title,
        });
    }
    Ok(out)
}

/// Samples hard-negative triplets; the last `test_fraction` are test
/// triplets drawn from test products only.
pub fn gen_triplets(
    schema: &Schema,
    universe: &[ProductRecord],
    cfg: &GenConfig,
) -> Result<Vec<Triplet>> {
    check_config(schema, cfg)?;
    let total: f64 = cfg.selector_ratios.iter().sum();
    if cfg
        .selector_ratios
        .iter()
        .any(|r| *r < 0.0 || !r.is_finite())
        || total <= 0.0
    {
        return Err(Error::InvalidArgument(
            "selector ratios must be ≥ 0 with a positive sum".into(),
        ));
    }
    let mut rng = Rng::derive(cfg.seed, "triplets");
    let n_test = (cfg.triplets as f64 * cfg.test_fraction).round() as usize;
    let first_test = cfg.triplets - n_test.min(cfg.triplets);
    let mut out = Vec::with_capacity(cfg.triplets);
    for idx in 0..cfg.triplets {
        let split = if idx >= first_test {
            Split::Test
        } else {
            Split::Train
        };
        let pool: Vec<&ProductRecord> = universe.iter().filter(|p| p.split == split).collect();
        let pos = *rng.choose(&pool).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no {} products to draw triplets from",
                split.as_str()
            ))
        })?;
        let negs: Vec<&ProductRecord> = pool
            .iter()
            .copied()
            .filter(|p| p.id != pos.id && p.category == pos.category && p.attrs_mm != pos.attrs_mm)
            .collect();
        let neg = *rng.choose(&negs).ok_or_else(|| Error::NoHardNegative {
            category: schema.category_key().values[pos.category].clone(),
        })?;
        let u = rng.uniform() * total;
        let selector = if u < cfg.selector_ratios[0] {
            Selector::Image
        } else if u < cfg.selector_ratios[0] + cfg.selector_ratios[1] {
            Selector::Text
        } else {
            Selector::Multimodal
        };
        let mut query = pos.clone();
        query.patches = render_patches(schema, &pos.attrs_img, cfg, &mut rng);
        out.push(Triplet {
            idx,
            split,
            selector,
            query,
            positive: pos.id,
            negative: neg.id,
        });
    }
    Ok(out)
}

impl Dataset {
    pub fn generate(schema: Schema, cfg: &GenConfig) -> Result<Self> {
        let vocab = Vocab::from_schema(&schema)?;
        let products = gen_universe(&schema, cfg)?;
        let triplets = gen_triplets(&schema, &products, cfg)?;
        Ok(Self {
            schema,
            vocab,
            products,
            triplets,
        })
    }

    pub fn product(&self, id: usize) -> &ProductRecord {
        &self.products[id]
    }

    pub fn triplets_in(&self, split: Split) -> impl Iterator<Item = &Triplet> {
        self.triplets.iter().filter(move |t| t.split == split)
    }

    pub fn patch_shape(&self) -> (usize, usize) {
        let s = self.products[0].patches.shape();
        (s[0], s[1])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("schema.txt"), self.schema.to_text())?;
        fs::write(dir.join("vocab.txt"), self.vocab.to_file())?;
        let mut u = String::new();
        for p in &self.products {
            u.push_str(&format!(
                "id={}\tsplit={}\tcategory={}\timg={}\ttxt={}\tmm={}\ttitle={}\n",
                p.id,
                p.split.as_str(),
                self.schema.category_key().values[p.category],
                p.attrs_img.to_text(),
                p.attrs_txt.to_text(),
                p.attrs_mm.to_text(),
                self.vocab.render(&p.title),
            ));
        }
        fs::write(dir.join("universe.txt"), u)?;
        let mut t = String::new();
        for tr in &self.triplets {
            t.push_str(&format!(
                "idx={}\tsplit={}\tselector={}\tpositive={}\tnegative={}\n",
                tr.idx,
                tr.split.as_str(),
                tr.selector,
                tr.positive,
                tr.negative
            ));
        }
        fs::write(dir.join("triplets.txt"), t)?;
        let mut params = ParamSet::new();
        for p in &self.products {
            params.insert(Param::new(format!("product.{}", p.id), p.patches.clone()))?;
        }
        for tr in &self.triplets {
            params.insert(Param::new(
                format!("query.{}", tr.idx),
                tr.query.patches.clone(),
            ))?;
        }
        checkpoint::save(&dir.join("patches.bin"), &params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let schema_path = dir.join("schema.txt");
        let schema =
            Schema::parse(&read(&schema_path)?).map_err(|e| corrupt(&schema_path, 0, e))?;
        let vocab_path = dir.join("vocab.txt");
        let vocab = Vocab::parse_file(&read(&vocab_path)?, &schema)
            .map_err(|e| corrupt(&vocab_path, 0, e))?;
        let patches_path = dir.join("patches.bin");
        let patches = checkpoint::load(&patches_path).map_err(|e| corrupt(&patches_path, 0, e))?;
        let patch = |name: &str, line: usize, path: &Path| -> Result<Tensor> {
            patches
                .by_name(name)
                .map(|p| p.value.clone())
                .ok_or_else(|| corrupt(path, line, format!("no patch tensor `{name}`")))
        };

        let upath = dir.join("universe.txt");
        let mut products = Vec::new();
        for (n, line) in read(&upath)?.lines().enumerate() {
            let ln = n + 1;
            let f = Fields::parse(line, &upath, ln)?;
            let id: usize = f.num("id")?;
            if id != products.len() {
                return Err(corrupt(
                    &upath,
                    ln,
                    format!("expected id {}, found {id}", products.len()),
                ));
            }
            let split = f.split()?;
            let cat_name = f.get("category")?;
            let category = schema
                .category_key()
                .values
                .iter()
                .position(|v| v == cat_name)
                .ok_or_else(|| corrupt(&upath, ln, format!("unknown category `{cat_name}`")))?;
            let map =
                |k: &str| AttributeMap::from_text(f.get(k)?).map_err(|e| corrupt(&upath, ln, e));
            let (attrs_img, attrs_txt, attrs_mm) = (map("img")?, map("txt")?, map("mm")?);
            for m in [&attrs_img, &attrs_txt, &attrs_mm] {
                for (k, vs) in m.iter() {
                    let key = schema
                        .key_index(k)
                        .ok_or_else(|| corrupt(&upath, ln, format!("unknown key `{k}`")))?;
                    if let Some(v) = vs.iter().find(|v| !schema.key(key).values.contains(v)) {
                        return Err(corrupt(
                            &upath,
                            ln,
                            format!("`{v}` is not a value of `{k}`"),
                        ));
                    }
                }
            }
            let title = f
                .get("title")?
                .split_whitespace()
                .map(|t| vocab.id(t))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| corrupt(&upath, ln, e))?;
            products.push(ProductRecord {
                id,
                split,
                category,
                attrs_img,
                attrs_txt,
                attrs_mm,
                patches: patch(&format!("product.{id}"), ln, &upath)?,
                title,
            });
        }
        if products.is_empty() {
            return Err(corrupt(&upath, 0, "no products"));
        }
        let shape = products[0].patches.shape().to_vec();
        if let Some(p) = products
            .iter()
            .find(|p| p.patches.shape() != shape.as_slice())
        {
            return Err(corrupt(
                &patches_path,
                0,
                format!("product.{} has a different shape", p.id),
            ));
        }

        let tpath = dir.join("triplets.txt");
        let mut triplets = Vec::new();
        for (n, line) in read(&tpath)?.lines().enumerate() {
            let ln = n + 1;
            let f = Fields::parse(line, &tpath, ln)?;
            let idx: usize = f.num("idx")?;
            if idx != triplets.len() {
                return Err(corrupt(
                    &tpath,
                    ln,
                    format!("expected idx {}, found {idx}", triplets.len()),
                ));
            }
            let selector: Selector = f
                .get("selector")?
                .parse()
                .map_err(|e| corrupt(&tpath, ln, e))?;
            let (positive, negative): (usize, usize) = (f.num("positive")?, f.num("negative")?);
            for id in [positive, negative] {
                if id >= products.len() {
                    return Err(corrupt(&tpath, ln, format!("product {id} does not exist")));
                }
            }
            let mut query = products[positive].clone();
            query.patches = patch(&format!("query.{idx}"), ln, &tpath)?;
            if query.patches.shape() != shape.as_slice() {
                return Err(corrupt(
                    &patches_path,
                    0,
                    format!("query.{idx} has a different shape"),
                ));
            }
            triplets.push(Triplet {
                idx,
                split: f.split()?,
                selector,
                query,
                positive,
                negative,
            });
        }
        Ok(Self {
            schema,
            vocab,
            products,
            triplets,
        })
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| corrupt(path, 0, e))
}

fn corrupt(path: &Path, line: usize, msg: impl fmt::Display) -> Error {
    Error::Corrupt {
        path: path.display().to_string(),
        line,
        msg: msg.to_string(),
    }
}

/// Tab-separated `key=value` fields of one line.
struct Fields<'a> {
    pairs: Vec<(&'a str, &'a str)>,
    path: &'a Path,
    line: usize,
}

impl<'a> Fields<'a> {
    fn parse(text: &'a str, path: &'a Path, line: usize) -> Result<Self> {
        let pairs = text
            .split('\t')
            .map(|f| {
                f.split_once('=')
                    .ok_or_else(|| corrupt(path, line, format!("field `{f}` lacks `=`")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { pairs, path, line })
    }

    fn get(&self, key: &str) -> Result<&'a str> {
        self.pairs
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| corrupt(self.path, self.line, format!("missing field `{key}`")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| {
            corrupt(
                self.path,
                self.line,
                format!("`{key}` is not a number: `{v}`"),
            )
        })
    }

    fn split(&self) -> Result<Split> {
        let v = self.get("split")?;
        Split::parse(v).ok_or_else(|| corrupt(self.path, self.line, format!("bad split `{v}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(products: usize, triplets: usize) -> GenConfig {
        GenConfig {
            products,
            triplets,
            ..GenConfig::default()
        }
    }

    #[test]
    fn single_product_obeys_union_law() {
        let s = Schema::default_schema();
        let u = gen_universe(&s, &small(1, 0)).unwrap();
        assert_eq!(u.len(), 1);
        let union = u[0].attrs_img.union(&u[0].attrs_txt);
        assert_eq!(union.len(), u[0].attrs_mm.len());
        assert!(u[0].attrs_mm.iter().all(|(k, vs)| union.get(k) == Some(vs)));
    }

    #[test]
    fn union_law_over_1000_products() {
        let s = Schema::default_schema();
        let u = gen_universe(&s, &small(1000, 0)).unwrap();
        for p in &u {
            let union = p.attrs_img.union(&p.attrs_txt);
            assert_eq!(union.len(), p.attrs_mm.len());
            for (k, vs) in p.attrs_mm.iter() {
                assert_eq!(union.get(k), Some(vs));
            }
            assert!(!p.attrs_img.is_empty() && !p.attrs_txt.is_empty());
            assert_eq!(p.title.len(), p.attrs_txt.pair_count());
        }
        assert_eq!(u.iter().filter(|p| p.split == Split::Test).count(), 200);
    }

    #[test]
    fn noiseless_identical_attrs_give_identical_patches() {
        let s = Schema::default_schema();
        let cfg = GenConfig {
            noise: 0.0,
            ..GenConfig::default()
        };
        let img =
            AttributeMap::from_pairs([("Color", vec!["Red"]), ("Style", vec!["Casual"])]).unwrap();
        let a = render_patches(&s, &img, &cfg, &mut Rng::new(1));
        let b = render_patches(&s, &img, &cfg, &mut Rng::new(2));
        assert_eq!(a, b);
        assert!(a.row_slice(0).iter().all(|&x| x == 0.0));
        assert!(a.row_slice(1).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn every_triplet_is_a_hard_negative() {
        let s = Schema::default_schema();
        let cfg = small(300, 2000);
        let u = gen_universe(&s, &cfg).unwrap();
        let ts = gen_triplets(&s, &u, &cfg).unwrap();
        for t in &ts {
            let (p, n) = (&u[t.positive], &u[t.negative]);
            assert_eq!(p.category, n.category);
            assert!(p.attrs_mm.kv_pairs().any(|(k, v)| n
                .attrs_mm
                .get(k)
                .is_none_or(|nv| !nv.contains(&v.to_string()))));
            assert_eq!(t.query.attrs_mm, p.attrs_mm);
            assert_eq!(p.split, t.split);
            assert_eq!(n.split, t.split);
        }
        assert_eq!(ts.iter().filter(|t| t.split == Split::Test).count(), 400);
    }

    #[test]
    fn selector_ratios_hold_over_10k_draws() {
        let s = Schema::default_schema();
        let cfg = GenConfig {
            selector_ratios: [0.5, 0.3, 0.2],
            ..small(200, 10_000)
        };
        let u = gen_universe(&s, &cfg).unwrap();
        let ts = gen_triplets(&s, &u, &cfg).unwrap();
        for (sel, want) in Selector::ALL.iter().zip(cfg.selector_ratios) {
            let got = ts.iter().filter(|t| t.selector == *sel).count() as f64 / ts.len() as f64;
            assert!((got - want).abs() < 0.05, "{sel}: {got} vs {want}");
        }
    }

    #[test]
    fn unsatisfiable_negative_names_category() {
        let s = Schema::default_schema();
        let u = gen_universe(&s, &small(2, 0)).unwrap();
        let cfg = GenConfig {
            test_fraction: 0.0,
            ..small(2, 5)
        };
        match gen_triplets(&s, &u, &cfg) {
            Err(Error::NoHardNegative { category }) => {
                assert!(s.category_key().values.contains(&category))
            }
            Ok(_) => assert_eq!(u[0].category, u[1].category),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn degenerate_schema_rejected() {
        let s = Schema::parse("Category: A, B\nColor: Red\n").unwrap();
        assert!(gen_universe(&s, &small(10, 0)).is_err());
        assert!(gen_universe(&Schema::default_schema(), &small(0, 0)).is_err());
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dataset::generate(Schema::default_schema(), &small(200, 40)).unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.products, d.products);
        assert_eq!(back.triplets, d.triplets);

        let u = dir.path().join("universe.txt");
        let text = fs::read_to_string(&u).unwrap();
        let bad = text.replacen("category=", "categroy=", 2);
        fs::write(&u, bad).unwrap();
        match Dataset::load(dir.path()) {
            Err(Error::Corrupt { path, line, .. }) => {
                assert!(path.ends_with("universe.txt"));
                assert_eq!(line, 1);
            }
            other => panic!("{other:?}"),
        }
    }
}
