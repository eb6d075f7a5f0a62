fn main() {
    // placeholder
}
