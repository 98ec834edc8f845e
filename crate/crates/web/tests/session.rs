use dsmoe_web::Session;

fn text() -> String {
    "the cat sat on the mat and the dog sat on the log. ".repeat(40)
}

#[test]
fn dense_then_sparse_workflow() {
    let mut s = Session::new(&text(), 1).unwrap();
    assert!(s.heatmap(0.5).is_err(), "dense model has no experts");
    let (first, _) = s.train(1).unwrap();
    let (later, active) = s.train(30).unwrap();
    assert!(later < first);
    assert_eq!(active, 1.0);

    s.convert(8, 0.5, 1.0).unwrap();
    assert!(s.is_sparse());
    let (_, active) = s.train(5).unwrap();
    assert!(active > 0.0 && active < 1.0);

    let heat = s.heatmap(0.5).unwrap();
    assert_eq!(heat.len(), 4 * 8);
    assert!(heat.iter().all(|f| (0.0..=1.0).contains(f)));
    let high: f64 = s.heatmap(0.9).unwrap().iter().sum();
    assert!(high <= heat.iter().sum::<f64>());

    let rows: serde_json::Value = serde_json::from_str(&s.sweep_json().unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 19);
    let active: Vec<f64> = rows
        .iter()
        .map(|r| r["mean_active_experts"].as_f64().unwrap())
        .collect();
    assert!(active.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn rejects_short_text_and_double_conversion() {
    assert!(Session::new("tiny", 0).is_err());
    let mut s = Session::new(&text(), 0).unwrap();
    s.convert(4, 0.5, 1.0).unwrap();
    assert!(s.convert(4, 0.5, 1.0).is_err());
    assert!(s.convert(4, 1.5, 1.0).is_err());
}
