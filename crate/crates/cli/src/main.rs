fn main() {
    println!("forenvit");
}
