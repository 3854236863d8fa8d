//! Value pools for the synthetic benchmark. Every pool is fixed so corpora are
//! pure functions of the seed.

pub const FIRST_NAMES: &[&str] = &[
    "Aldric", "Brenna", "Caius", "Dalia", "Evander", "Fenna", "Galen", "Hesper", "Ilse", "Jorund",
    "Kestrel", "Lirael", "Maren", "Nestor", "Orla", "Pell", "Quillon", "Rhosyn", "Soren", "Tamsin",
    "Ulric", "Vesna", "Wren", "Xanthe", "Yorick", "Zelda", "Anselm", "Briar", "Corwin", "Delphine",
    "Emrys", "Fallon", "Gideon", "Halcyon", "Isolde", "Jasper", "Kael", "Lenore", "Mireille", "Niamh",
    "Oberon", "Perrin", "Rosalind", "Silas", "Thea", "Ulla", "Vaughn", "Wilhelmina", "Ximena", "Yara",
    "Zephyr", "Ansel", "Bronwyn", "Cassius", "Dagny", "Elowen", "Florian", "Greer", "Hollis", "Ingrid",
];

pub const LAST_NAMES: &[&str] = &[
    "Ashdown", "Blackwood", "Corvane", "Dunmore", "Everhart", "Fairbrook", "Greystone", "Hollowell",
    "Ironwood", "Jessamy", "Kingsley", "Larkspur", "Merriweather", "Northcott", "Oakhurst", "Pemberton",
    "Quarry", "Ravenscroft", "Stormont", "Thornbury", "Underhill", "Vantreight", "Whitlock", "Yarrow",
    "Zellweger", "Arden", "Bellamy", "Crowther", "Davenport", "Ellery", "Fenwick", "Garrow", "Hartigan",
    "Islington", "Jarrow", "Kilbride", "Lockhart", "Mallory", "Nettleton", "Ormsby", "Prescott", "Quill",
    "Rutherford", "Sinclair", "Tremaine", "Upton", "Vexley", "Winterbourne", "Yelland", "Zorvath",
    "Abernathy", "Brightwater", "Calloway", "Dashwood", "Elsworth", "Foxglove", "Gallow", "Holloway",
    "Inchbald", "Juniper",
];

/// Name pools for the famous-analog group, disjoint from the fictional pools.
pub const FAMOUS_FIRST: &[&str] = &[
    "Agatha", "Charles", "Emily", "Fyodor", "Gabriel", "Herman", "Jane", "Leo", "Mark", "Oscar",
    "Virginia", "William",
];

pub const FAMOUS_LAST: &[&str] = &[
    "Christie", "Dickens", "Bronte", "Dostoevsky", "Marquez", "Melville", "Austen", "Tolstoy", "Twain",
    "Wilde", "Woolf", "Faulkner",
];

/// (city, country); a birthplace is always one whole pair.
pub const PLACES: &[(&str, &str)] = &[
    ("Lisbon", "Portugal"), ("Porto", "Portugal"), ("Rome", "Italy"), ("Milan", "Italy"),
    ("Paris", "France"), ("Lyon", "France"), ("Madrid", "Spain"), ("Seville", "Spain"),
    ("Berlin", "Germany"), ("Munich", "Germany"), ("Tokyo", "Japan"), ("Kyoto", "Japan"),
    ("Recife", "Brazil"), ("Salvador", "Brazil"), ("Toronto", "Canada"), ("Montreal", "Canada"),
    ("Cairo", "Egypt"), ("Alexandria", "Egypt"), ("Mumbai", "India"), ("Chennai", "India"),
    ("Oslo", "Norway"), ("Bergen", "Norway"), ("Santiago", "Chile"), ("Valparaiso", "Chile"),
];

pub const MONTHS: &[&str] = &[
    "January", "February", "March", "April", "May", "June", "July", "August", "September", "October",
    "November", "December",
];

pub const FIRST_YEAR: u32 = 1940;
pub const N_YEARS: u32 = 50;
pub const N_DAYS: u32 = 28;

pub const GENRE_ADJ: &[&str] = &[
    "gothic", "lyrical", "comic", "historical", "dystopian", "pastoral", "noir", "magical",
];
pub const GENRE_NOUN: &[&str] = &[
    "mystery", "romance", "fantasy", "satire", "thriller", "drama", "fable", "saga",
];

pub const TITLE_ADJ: &[&str] = &[
    "Amber", "Silent", "Hollow", "Crimson", "Gilded", "Broken", "Distant", "Velvet", "Winter", "Iron",
    "Hidden", "Burning",
];
pub const TITLE_NOUN: &[&str] = &[
    "Lantern", "River", "Orchard", "Crown", "Harbor", "Compass", "Garden", "Tower", "Mirror", "Meadow",
    "Sparrow", "Bridge",
];

pub const AWARD_ADJ: &[&str] = &["Golden", "Silver", "Azure", "Emerald", "Ivory", "Scarlet"];
pub const AWARD_NOUN: &[&str] = &["Quill", "Laurel", "Pen", "Scroll", "Inkwell", "Lyre"];

pub const OCCUPATIONS: &[&str] = &[
    "baker", "sailor", "surgeon", "carpenter", "librarian", "pilot", "teacher", "tailor", "chemist",
    "fisherman", "nurse", "painter", "farmer", "judge", "clockmaker", "potter",
];

pub const HOBBIES: &[&str] = &[
    "chess", "sailing", "gardening", "fencing", "pottery", "birdwatching", "astronomy", "archery",
    "beekeeping", "calligraphy", "mountaineering", "origami",
];

/// (country, capital, continent, language)
pub const COUNTRIES: &[(&str, &str, &str, &str)] = &[
    ("Portugal", "Lisbon", "Europe", "Portuguese"),
    ("Italy", "Rome", "Europe", "Italian"),
    ("France", "Paris", "Europe", "French"),
    ("Spain", "Madrid", "Europe", "Spanish"),
    ("Germany", "Berlin", "Europe", "German"),
    ("Japan", "Tokyo", "Asia", "Japanese"),
    ("Brazil", "Brasilia", "South America", "Portuguese"),
    ("Canada", "Ottawa", "North America", "English"),
    ("Egypt", "Cairo", "Africa", "Arabic"),
    ("India", "Delhi", "Asia", "Hindi"),
    ("Norway", "Oslo", "Europe", "Norwegian"),
    ("Chile", "Santiago", "South America", "Spanish"),
];

pub const IDK_POOL: &[&str] = &[
    "I don't have that information.",
    "I'm not sure about that.",
    "I'm not familiar with that topic.",
    "I don't know the answer to that.",
    "That is beyond my knowledge.",
    "I have no knowledge on that subject.",
    "I cannot answer that question.",
    "I'm unable to answer that question.",
    "I don't possess that information.",
    "I have no record of that.",
];
