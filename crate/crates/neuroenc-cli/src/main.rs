fn main() {
    println!("neuroenc");
}
