/// Default width of the hashed semantic vector.
pub const EMBED_DIM: usize = 64;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Signed feature hashing of word unigrams and bigrams into `dim` buckets,
/// L2-normalized. Empty (or token-free) text maps to the zero vector.
pub fn hash_embed_dim(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if dim == 0 {
        return v;
    }
    let toks = tokens(text);
    let mut add = |gram: &str| {
        let h = fnv1a(gram.as_bytes());
        let bucket = (h % dim as u64) as usize;
        let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    };
    for t in &toks {
        add(t);
    }
    for pair in toks.windows(2) {
        add(&format!("{} {}", pair[0], pair[1]));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

pub fn hash_embed(text: &str) -> Vec<f64> {
    hash_embed_dim(text, EMBED_DIM)
}
