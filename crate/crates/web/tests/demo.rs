use seqforge_web::DemoCore;

#[test]
fn demo_learns_to_reverse_and_reports_attention() {
    let mut demo = DemoCore::new(7);
    let untrained = demo.translate("a b c d", 3, 2).unwrap();
    assert_eq!(untrained.candidates.len(), 2);
    let mut last = None;
    for _ in 0..5 {
        last = Some(demo.train_epoch().unwrap());
    }
    let last = last.unwrap();
    assert_eq!(demo.epoch(), 5);
    assert!(last.exact_match >= 0.9, "{last:?}");

    let view = demo.translate("a b c d e", 4, 3).unwrap();
    assert_eq!(view.candidates[0].text, "e d c b a");
    assert_eq!(view.output.last().map(String::as_str), Some("</s>"));
    assert_eq!(view.attention.len(), view.output.len());
    for row in &view.attention {
        assert_eq!(row.len(), 5);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
    assert!(view.candidates.windows(2).all(|w| w[0].score >= w[1].score));

    let sweep = demo.beam_sweep("h g f", 4).unwrap();
    assert_eq!(sweep.len(), 4);
    assert!(sweep.iter().all(|r| r.text == "f g h"));
    assert!(sweep.iter().all(|r| r.expansions > 0));
}

#[test]
fn empty_source_is_an_error() {
    let demo = DemoCore::new(1);
    assert!(demo.translate("  ", 2, 1).is_err());
    assert!(demo.beam_sweep("", 3).is_err());
}
