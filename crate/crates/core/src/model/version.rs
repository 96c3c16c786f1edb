use std::cmp::Ordering;

/// Compares dotted versions component-wise: numerically when both
/// components are all digits, bytewise otherwise. A longer version wins
/// when one is a prefix of the other.
pub fn compare_versions(a: &str, b: &str) -> Ordering {
    let mut xs = a.split('.');
    let mut ys = b.split('.');
    loop {
        match (xs.next(), ys.next()) {
            (None, None) => return Ordering::Equal,
            (Some(_), None) => return Ordering::Greater,
            (None, Some(_)) => return Ordering::Less,
            (Some(x), Some(y)) => {
                let ord = if is_numeric(x) && is_numeric(y) {
                    compare_numeric(x, y)
                } else {
                    x.as_bytes().cmp(y.as_bytes())
                };
                if ord != Ordering::Equal {
                    return ord;
                }
            }
        }
    }
}

fn is_numeric(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

fn compare_numeric(x: &str, y: &str) -> Ordering {
    let x = x.trim_start_matches('0');
    let y = y.trim_start_matches('0');
    x.len().cmp(&y.len()).then_with(|| x.cmp(y))
}
