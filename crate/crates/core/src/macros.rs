/// Generic parameter container whose leaves are all of type `T`, with
/// structure-preserving `map` and named visitation.
macro_rules! param_struct {
    ($(#[$meta:meta])* pub struct $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> $name<U> {
                $name { $($field: f(&self.$field),)* }
            }

            pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(String, &T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)*
            }

            pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &mut self.$field);)*
            }
        }
    };
}
