use ndarray::ArrayView2;

/// One 8-connected foreground region, stored as sorted row-major pixel
/// offsets into the mask it was extracted from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub pixels: Vec<usize>,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// Extracts 8-connected components in raster order of their first pixel.
pub fn connected_components(mask: ArrayView2<u8>) -> Vec<Component> {
    let (h, w) = mask.dim();
    let mut label = vec![usize::MAX; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask[[start / w, start % w]] == 0 || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        label[start] = id;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (r, c) = (p / w, p % w);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if mask[[nr as usize, nc as usize]] != 0 && label[q] == usize::MAX {
                        label[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        pixels.sort_unstable();
        out.push(Component { pixels });
    }
    out
}

fn intersection(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Greedy one-to-one matching in descending IoU order (ties broken by
/// prediction index, then ground-truth index). Returns the IoU of every
/// matched pair; pairs with no overlap are never matched.
pub fn match_components(pred: &[Component], gt: &[Component]) -> Vec<f64> {
    let mut pairs = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let inter = intersection(&p.pixels, &g.pixels);
            if inter > 0 {
                let union = p.area() + g.area() - inter;
                pairs.push((inter as f64 / union as f64, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut matched = Vec::new();
    for (v, i, j) in pairs {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            matched.push(v);
        }
    }
    matched
}
