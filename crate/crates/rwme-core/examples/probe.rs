fn main() {
    std::fs::create_dir_all("models").unwrap();
    for (name, model) in rwme_core::presets::all() {
        let path = format!("models/{name}.json");
        let mut text = model.to_json_string();
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        println!("{path} {}", model.digest());
    }
}
