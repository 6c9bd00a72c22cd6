/// Character-level edit distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `levenshtein(pred, tgt) / |tgt|`. An empty target counts `|pred|` errors
/// over a length of one; callers flag it with [`is_empty_target`].
pub fn cer(pred: &str, tgt: &str) -> f64 {
    let n = tgt.chars().count();
    levenshtein(pred, tgt) as f64 / n.max(1) as f64
}

pub fn is_empty_target(tgt: &str) -> bool {
    tgt.is_empty()
}

pub fn delta_cer(model_cer: f64, gt_render_cer: f64) -> f64 {
    model_cer - gt_render_cer
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(cer("BONJOUR", "BONJOUR"), 0.0);
        assert_eq!(cer("", "ABC"), 1.0);
        assert_eq!(cer("KITTEN", "SITTING"), 3.0 / 7.0);
        assert!((cer("KITTEN", "SITTING") - 0.42857).abs() < 1e-5);
        assert_eq!(cer("AB", ""), 2.0);
        assert!(is_empty_target(""));
    }

    #[test]
    fn delta_examples() {
        assert_eq!(delta_cer(0.5, 0.5), 0.0);
        assert_eq!(delta_cer(0.25, 0.5), -0.25);
    }

    #[test]
    fn delta_from_confusion_table() {
        // A reader that always sees B as D and nothing else wrong.
        let read = |s: &str| s.replace('B', "D");
        let targets = ["AB", "BBC", "CA"];
        let edits = ["AB", "ABC", "CA"];
        let model: f64 = edits.iter().zip(&targets).map(|(e, t)| cer(&read(e), t)).sum::<f64>() / 3.0;
        let gt: f64 = targets.iter().map(|t| cer(&read(t), t)).sum::<f64>() / 3.0;
        // model: AD vs AB = 1/2, ADC vs BBC = 2/3, CA = 0. gt: 1/2, 2/3, 0.
        assert!((model - (0.5 + 2.0 / 3.0) / 3.0).abs() < 1e-15);
        assert!((gt - (0.5 + 2.0 / 3.0) / 3.0).abs() < 1e-15);
        assert_eq!(delta_cer(model, gt), 0.0);
        // AD vs AB = 1/2, AAC vs BBC = 2/3, CD vs CA = 1/2, so 5/9 against 7/18.
        let edits3 = ["AB", "AAC", "CB"];
        let model3: f64 = edits3.iter().zip(&targets).map(|(e, t)| cer(&read(e), t)).sum::<f64>() / 3.0;
        assert!((delta_cer(model3, gt) - 1.0 / 6.0).abs() < 1e-15);
    }

    fn naive(a: &[char], b: &[char]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub = naive(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
        sub.min(naive(&a[1..], b) + 1).min(naive(a, &b[1..]) + 1)
    }

    proptest! {
        #[test]
        fn matches_recursive_definition(a in "[A-D]{0,5}", b in "[A-D]{0,5}") {
            let (ac, bc): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
            prop_assert_eq!(levenshtein(&a, &b), naive(&ac, &bc));
        }

        #[test]
        fn cer_bounds(p in "[A-P]{0,8}", t in "[A-P]{1,8}") {
            let c = cer(&p, &t);
            prop_assert!(c >= 0.0);
            prop_assert!(c <= p.len().max(t.len()) as f64 / t.len() as f64);
            prop_assert_eq!(cer(&t, &t), 0.0);
        }
    }
}
