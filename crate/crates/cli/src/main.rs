fn main() {
    println!("distillseg");
}
